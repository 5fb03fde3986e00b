#pragma once

// Synthetic RGB-ambiguous multispectral tasks and on-disk datasets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/image.hpp"
#include "deflect/io.hpp"
#include "deflect/model.hpp"
#include "deflect/msi.hpp"
#include "deflect/random.hpp"

namespace deflect {

struct Sample {
  MultispectralImage image;
  std::vector<int> labels;  // one class, or H W per-pixel classes
  std::uint64_t id = 0;
};

struct Dataset {
  TaskKind task = TaskKind::classification;
  std::size_t num_classes = 0;
  std::vector<Sample> train, val, test;

  const std::vector<Sample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

/**
 * Classes 0..ambiguous_classes-1 share one RGB mean spectrum and differ only
 * in the remaining bands. Each image is scaled by a random illumination
 * factor and a smooth multiplicative texture, then perturbed by Gaussian
 * noise and clamped to [0, 1].
 */
struct SyntheticTaskSpec {
  TaskKind task = TaskKind::classification;
  std::size_t num_classes = 4;
  std::size_t ambiguous_classes = 2;
  std::vector<std::string> bands{"red", "green", "blue", "nir", "swir1", "swir2"};
  std::size_t image_size = 32;
  std::size_t blob_count = 6;
  double smoothness = 6.0;     // blob radius in pixels
  double texture = 0.15;       // relative amplitude of the texture field
  double illumination = 0.25;  // brightness factor drawn from [1 - x, 1 + x]
  double noise = 0.02;
  std::size_t train_size = 160, val_size = 40, test_size = 80;
  std::vector<std::vector<double>> class_spectra;  // K × C; empty: drawn from the seed

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (num_classes < 2) out.push_back("a task needs at least 2 classes, got " + std::to_string(num_classes));
    if (num_classes > 255) out.push_back("at most 255 classes are supported");
    if (ambiguous_classes < 2 || ambiguous_classes > num_classes) {
      out.push_back("ambiguous_classes must lie in 2..num_classes");
    }
    for (const auto& b : rgb_band_names())
      if (std::find(bands.begin(), bands.end(), b) == bands.end()) out.push_back("bands lack '" + b + "'");
    if (bands.size() < 4) out.push_back("at least one band beyond RGB is required");
    try {
      MultispectralImage probe(bands.size(), 1, 1, bands);
    } catch (const ConfigError& e) {
      out.emplace_back(e.what());
    }
    if (image_size == 0) out.push_back("image_size must be positive");
    if (blob_count == 0) out.push_back("blob_count must be positive");
    if (!(smoothness > 0)) out.push_back("smoothness must be positive");
    if (!(texture >= 0 && texture < 1)) out.push_back("texture must lie in [0, 1)");
    if (!(illumination >= 0 && illumination < 1)) out.push_back("illumination must lie in [0, 1)");
    if (!(noise >= 0)) out.push_back("noise must be non-negative");
    if (train_size == 0 || val_size == 0 || test_size == 0) out.push_back("every split needs at least one sample");
    if (!class_spectra.empty()) {
      if (class_spectra.size() != num_classes) out.push_back("class_spectra needs one row per class");
      for (const auto& row : class_spectra)
        if (row.size() != bands.size()) {
          out.push_back("class_spectra rows need one value per band");
          break;
        }
    }
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid synthetic task:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
};

namespace detail {

inline bool is_rgb(const std::string& b) { return b == "red" || b == "green" || b == "blue"; }

inline double angle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0));
}

}  // namespace detail

/// K × C mean spectra: shared RGB for the ambiguous classes, well-separated directions elsewhere.
inline std::vector<std::vector<double>> class_spectra(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (!spec.class_spectra.empty()) return spec.class_spectra;
  auto rng = derive_rng(seed, 0x5350);
  std::uniform_real_distribution<double> rgb(0.1, 0.5), extra(0.05, 0.9);
  const std::size_t k = spec.num_classes, c = spec.bands.size();
  std::vector<std::size_t> rgb_idx, extra_idx;
  for (std::size_t b = 0; b < c; ++b) (detail::is_rgb(spec.bands[b]) ? rgb_idx : extra_idx).push_back(b);

  auto draw = [&](std::uniform_real_distribution<double>& dist, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
  };
  // Rejection sampling keeps directions apart so brightness changes cannot map one class onto another.
  auto separated = [&](std::uniform_real_distribution<double>& dist, std::size_t n, std::size_t count,
                       double min_angle, double min_dist) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::vector<std::vector<double>> rows;
      for (std::size_t i = 0; i < count; ++i) rows.push_back(draw(dist, n));
      bool ok = true;
      for (std::size_t i = 0; i < count && ok; ++i)
        for (std::size_t j = i + 1; j < count && ok; ++j) {
          double d = 0;
          for (std::size_t t = 0; t < n; ++t) d += (rows[i][t] - rows[j][t]) * (rows[i][t] - rows[j][t]);
          ok = detail::angle(rows[i], rows[j]) >= min_angle && std::sqrt(d) >= min_dist;
        }
      if (ok) return rows;
      min_angle *= 0.999;
    }
    throw ConfigError("could not draw separated class spectra; lower num_classes or add bands");
  };

  const double extra_angle = extra_idx.size() >= 2 ? 0.35 : 0.0;
  auto extra_rows = separated(extra, extra_idx.size(), k, extra_angle, 0.25);
  auto rgb_rows = separated(rgb, rgb_idx.size(), k - spec.ambiguous_classes + 1, 0.15, 0.12);

  std::vector<std::vector<double>> out(k, std::vector<double>(c));
  for (std::size_t cls = 0; cls < k; ++cls) {
    const auto& rgb_row = rgb_rows[cls < spec.ambiguous_classes ? 0 : cls - spec.ambiguous_classes + 1];
    for (std::size_t i = 0; i < rgb_idx.size(); ++i) out[cls][rgb_idx[i]] = rgb_row[i];
    for (std::size_t i = 0; i < extra_idx.size(); ++i) out[cls][extra_idx[i]] = extra_rows[cls][i];
  }
  return out;
}

namespace detail {

struct Blob {
  double y, x, amplitude;
  int cls;
};

inline std::vector<Blob> draw_blobs(const SyntheticTaskSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(spec.image_size)), amp(-1.0, 1.0);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(spec.num_classes) - 1);
  std::vector<Blob> blobs(spec.blob_count);
  for (auto& b : blobs) b = {pos(rng), pos(rng), amp(rng), cls(rng)};
  return blobs;
}

/// Smooth field in [-1, 1] from Gaussian bumps.
inline std::vector<double> texture_field(const std::vector<Blob>& blobs, std::size_t size, double radius) {
  std::vector<double> f(size * size, 0.0);
  double peak = 0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double v = 0;
      for (const auto& b : blobs) {
        const double dy = static_cast<double>(y) + 0.5 - b.y, dx = static_cast<double>(x) + 0.5 - b.x;
        v += b.amplitude * std::exp(-(dy * dy + dx * dx) / (2 * radius * radius));
      }
      f[y * size + x] = v;
      peak = std::max(peak, std::abs(v));
    }
  if (peak > 0)
    for (auto& v : f) v /= peak;
  return f;
}

}  // namespace detail

/// One image; `cls` is the image class for classification and ignored for segmentation.
inline Sample synthesize(const SyntheticTaskSpec& spec, const std::vector<std::vector<double>>& spectra, int cls,
                         std::uint64_t seed, std::uint64_t id) {
  auto rng = derive_rng(seed, id);
  const std::size_t s = spec.image_size, c = spec.bands.size();
  const auto blobs = detail::draw_blobs(spec, rng);
  const auto field = detail::texture_field(blobs, s, spec.smoothness);
  std::uniform_real_distribution<double> illum(1.0 - spec.illumination, 1.0 + spec.illumination);
  const double brightness = illum(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  Sample out;
  out.id = id;
  out.image = MultispectralImage(c, s, s, spec.bands);
  std::vector<int> pixel_class(s * s, cls);
  if (spec.task == TaskKind::segmentation) {
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double best = 1e300;
        for (const auto& b : blobs) {
          const double dy = static_cast<double>(y) + 0.5 - b.y, dx = static_cast<double>(x) + 0.5 - b.x;
          if (dy * dy + dx * dx < best) {
            best = dy * dy + dx * dx;
            pixel_class[y * s + x] = b.cls;
          }
        }
      }
    out.labels = pixel_class;
  } else {
    out.labels = {cls};
  }
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double gain = brightness * (1.0 + spec.texture * field[y * s + x]);
      const auto& spectrum = spectra[static_cast<std::size_t>(pixel_class[y * s + x])];
      for (std::size_t b = 0; b < c; ++b) {
        const double v = spectrum[b] * gain + spec.noise * noise(rng);
        out.image.at(b, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

inline constexpr std::uint64_t kSplitStride = std::uint64_t{1} << 32;

/// Deterministic train/val/test splits; classification labels are balanced within each split.
inline Dataset generate_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto spectra = class_spectra(spec, seed);
  Dataset ds;
  ds.task = spec.task;
  ds.num_classes = spec.num_classes;
  auto make_split = [&](std::size_t count, std::uint64_t split_index) {
    std::vector<int> classes(count);
    for (std::size_t i = 0; i < count; ++i) classes[i] = static_cast<int>(i % spec.num_classes);
    auto rng = derive_rng(seed, 0x53504c00 + split_index);
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synthesize(spec, spectra, classes[i], seed, (split_index + 1) * kSplitStride + i));
    return out;
  };
  ds.train = make_split(spec.train_size, 0);
  ds.val = make_split(spec.val_size, 1);
  ds.test = make_split(spec.test_size, 2);
  return ds;
}

/**
 * Writes <dir>/<split>/<n>.msi (plus <n>.lbl for segmentation) and
 * <dir>/manifest.txt with one "split id image label" line per sample,
 * where label is a class id or a label-map path.
 */
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::ostringstream manifest;
  manifest << "# deflect-dataset v1 task=" << task_name(ds.task) << " classes=" << ds.num_classes << "\n";
  for (const char* name : {"train", "val", "test"}) {
    const auto& split = ds.split(name);
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& s = split[i];
      const std::string stem = std::string(name) + "/" + std::to_string(i);
      write_msi(dir / (stem + ".msi"), s.image);
      manifest << name << ' ' << s.id << ' ' << stem << ".msi ";
      if (ds.task == TaskKind::classification) {
        manifest << s.labels.at(0) << "\n";
      } else {
        LabelMap m{s.image.height, s.image.width, {}};
        for (int l : s.labels) m.labels.push_back(static_cast<std::uint8_t>(l));
        write_labels(dir / (stem + ".lbl"), m);
        manifest << stem << ".lbl\n";
      }
    }
  }
  write_text_atomic(dir / "manifest.txt", manifest.str());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw FormatError("no manifest.txt in " + dir.string());
  Dataset ds;
  std::string line;
  std::getline(in, line);
  std::istringstream header(line);
  std::string hash, tag, version, task, classes;
  header >> hash >> tag >> version >> task >> classes;
  if (hash != "#" || tag != "deflect-dataset" || version != "v1" || !task.starts_with("task=") ||
      !classes.starts_with("classes=")) {
    throw FormatError(dir.string() + "/manifest.txt: unrecognised header '" + line + "'");
  }
  ds.task = parse_task(task.substr(5));
  ds.num_classes = std::stoul(classes.substr(8));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string split, image, label;
    std::uint64_t id = 0;
    if (!(row >> split >> id >> image >> label)) {
      throw FormatError(dir.string() + "/manifest.txt:" + std::to_string(lineno) + ": malformed line");
    }
    Sample s;
    s.id = id;
    s.image = read_msi(dir / image);
    if (ds.task == TaskKind::classification) {
      s.labels = {std::stoi(label)};
    } else {
      const auto m = read_labels(dir / label);
      s.labels.assign(m.labels.begin(), m.labels.end());
    }
    if (split == "train") ds.train.push_back(std::move(s));
    else if (split == "val") ds.val.push_back(std::move(s));
    else if (split == "test") ds.test.push_back(std::move(s));
    else throw FormatError(dir.string() + "/manifest.txt:" + std::to_string(lineno) + ": unknown split '" + split + "'");
  }
  return ds;
}

}  // namespace deflect
