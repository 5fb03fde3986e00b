#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <map>

#include "deflect/checkpoint.hpp"
#include "deflect/dataset.hpp"
#include "deflect/diagnostics.hpp"
#include "deflect/msi.hpp"
#include "deflect/train.hpp"
#include "test_support.hpp"

using namespace deflect;
using namespace deflect::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("deflect_msi_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string format_message(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_msi(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

// Per-image mean over the selected bands.
std::vector<double> band_means(const MultispectralImage& img, const std::vector<std::size_t>& bands) {
  std::vector<double> out;
  const std::size_t px = img.height * img.width;
  for (auto b : bands) {
    double acc = 0;
    for (std::size_t i = 0; i < px; ++i) acc += img.data[b * px + i];
    out.push_back(acc / static_cast<double>(px));
  }
  return out;
}

// Nearest-centroid accuracy on `test` using centroids from `train`, restricted to `classes`.
double nearest_centroid(const std::vector<Sample>& train, const std::vector<Sample>& test,
                        const std::vector<std::size_t>& bands, const std::vector<int>& classes) {
  std::map<int, std::vector<double>> centroid;
  std::map<int, double> count;
  for (const auto& s : train) {
    const int c = s.labels[0];
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) continue;
    auto f = band_means(s.image, bands);
    auto& acc = centroid[c];
    acc.resize(f.size(), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
    count[c] += 1;
  }
  for (auto& [c, v] : centroid)
    for (auto& x : v) x /= count[c];
  std::size_t correct = 0, total = 0;
  for (const auto& s : test) {
    if (std::find(classes.begin(), classes.end(), s.labels[0]) == classes.end()) continue;
    auto f = band_means(s.image, bands);
    int best = -1;
    double best_d = 1e300;
    for (const auto& [c, v] : centroid) {
      double d = 0;
      for (std::size_t i = 0; i < f.size(); ++i) d += (f[i] - v[i]) * (f[i] - v[i]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == s.labels[0];
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST(Msi, SinglePixelRoundTrip) {
  MultispectralImage img(1, 1, 1, {"red"});
  img.data[0] = 0.25f;
  EXPECT_EQ(decode_msi(encode_msi(img)), img);
}

TEST(Msi, LayoutIsLittleEndianChannelMajor) {
  MultispectralImage img(2, 1, 2, {"a", "bc"});
  img.data = {1.0f, 2.0f, 3.0f, 0.5f};
  const auto bytes = encode_msi(img);
  ASSERT_EQ(bytes.size(), 4u + 12u + (2 + 1) + (2 + 2) + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MSI1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 1);
  EXPECT_EQ(bytes[17], 0);
  EXPECT_EQ(bytes[18], 'a');
  float last;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(last, 0.5f);
}

TEST(Msi, RandomImageRoundTripsThroughFile) {
  const auto img = random_image(32, six_bands(), 1);
  const auto path = scratch("roundtrip") / "img.msi";
  write_msi(path, img);
  const auto back = read_msi(path);
  EXPECT_EQ(back, img);
  EXPECT_EQ(std::memcmp(back.data.data(), img.data.data(), img.data.size() * 4), 0);
}

TEST(Msi, TruncationNamesExpectedAndActualBytes) {
  auto bytes = encode_msi(random_image(4, {"red", "green", "blue"}, 2));
  bytes.resize(bytes.size() - 10);
  const auto msg = format_message(bytes);
  EXPECT_NE(msg.find("expected 192 bytes, found 182"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
}

TEST(Msi, BadMagicAndVersion) {
  auto bytes = encode_msi(random_image(4, {"red"}, 3));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(format_message(bad).find("bad magic"), std::string::npos);
  bad = bytes;
  bad[3] = '2';
  EXPECT_NE(format_message(bad).find("unsupported MSI version '2' at byte offset 3"), std::string::npos);
  bytes.push_back(0);
  EXPECT_NE(format_message(bytes).find("trailing"), std::string::npos);
}

TEST(Msi, NonFiniteReflectanceIsFormatError) {
  auto img = random_image(4, {"red"}, 4);
  auto bytes = encode_msi(img);
  const float nan = std::nanf("");
  std::memcpy(bytes.data() + bytes.size() - 4, &nan, 4);
  EXPECT_THROW(decode_msi(bytes), FormatError);
}

TEST(Labels, RoundTrip) {
  LabelMap m{2, 3, {0, 1, 2, 255, 1, 0}};
  const auto back = decode_labels(encode_labels(m));
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.height, 2u);
  auto bytes = encode_labels(m);
  bytes.pop_back();
  EXPECT_THROW(decode_labels(bytes), FormatError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto mc = tiny_config(MethodKind::deflect);
  Model<double> model(mc, random_pretrained<double>(mc.vit, 5), 6);
  perturb_trainable(model, 0.1, 7);
  for (auto scope : {CheckpointScope::full, CheckpointScope::adapter}) {
    const auto ck = make_checkpoint(model.parameters(), scope, "{\"k\": 1}");
    const auto path = scratch("ck") / "model.dflt";
    save_checkpoint(path, ck);
    EXPECT_EQ(load_checkpoint(path), ck);
    EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(ck));
  }
}

TEST(Checkpoint, AdapterScopeHoldsThetaAAndPhiOnly) {
  auto mc = tiny_config(MethodKind::deflect);
  Model<float> model(mc, random_pretrained<float>(mc.vit, 8), 9);
  const auto ck = make_checkpoint(model.parameters(), CheckpointScope::adapter, "");
  std::size_t values = 0;
  for (const auto& t : ck.tensors) {
    EXPECT_NE(t.spec.group, ParamGroup::pretrained) << t.spec.name;
    EXPECT_EQ(t.precision, 4);
    values += t.values.size();
  }
  const auto c = model.parameters().count();
  EXPECT_EQ(values, c.theta_a + c.phi);
}

TEST(Checkpoint, TamperedByteIsIntegrityError) {
  auto mc = tiny_config(MethodKind::bitfit);
  Model<float> model(mc, random_pretrained<float>(mc.vit, 10), 11);
  auto bytes = encode_checkpoint(make_checkpoint(model.parameters(), CheckpointScope::full, "cfg"));
  for (std::size_t at : {std::size_t{9}, bytes.size() / 2, bytes.size() - 9, bytes.size() - 1}) {
    auto bad = bytes;
    bad[at] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(bad), IntegrityError) << at;
  }
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(bytes), IntegrityError);
}

TEST(Checkpoint, RestoreChecksNamesAndShapes) {
  auto mc = tiny_config(MethodKind::deflect);
  Model<float> a(mc, random_pretrained<float>(mc.vit, 12), 13);
  auto ck = make_checkpoint(a.parameters(), CheckpointScope::adapter, "");
  auto other = tiny_config(MethodKind::deflect);
  other.adapter.rank = 3;
  Model<float> b(other, random_pretrained<float>(other.vit, 12), 13);
  EXPECT_THROW(restore_checkpoint(ck, b.parameters()), IntegrityError);
  ck.tensors.pop_back();
  EXPECT_THROW(restore_checkpoint(ck, a.parameters()), IntegrityError);
}

TEST(Checkpoint, RestoredAdapterReproducesMetrics) {
  auto data = tiny_dataset(14);
  auto mc = tiny_config(MethodKind::deflect);
  const auto pre = random_pretrained<float>(mc.vit, 15);
  Model<float> trained(mc, pre, 16);
  TrainConfig tc;
  tc.max_steps = 6;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.evaluate_val = false;
  train(trained, data, tc);
  const auto path = scratch("restore") / "adapter.dflt";
  save_checkpoint(path, make_checkpoint(trained.parameters(), CheckpointScope::adapter, ""));
  Model<float> fresh(mc, pre, 99);
  restore_checkpoint(load_checkpoint(path), fresh.parameters());
  const auto a = evaluate(trained, data.test), b = evaluate(fresh, data.test);
  EXPECT_EQ(a.confusion, b.confusion);
  for (const auto& s : data.test) EXPECT_EQ(trained.logits(s.image, s.id).values(), fresh.logits(s.image, s.id).values());
}

TEST(Dataset, FixedSeedIsDeterministic) {
  SyntheticTaskSpec spec;
  spec.train_size = spec.val_size = spec.test_size = 8;
  const auto a = generate_dataset(spec, 17), b = generate_dataset(spec, 17), c = generate_dataset(spec, 18);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(a.train[i].image, b.train[i].image);
    EXPECT_EQ(a.train[i].labels, b.train[i].labels);
  }
  EXPECT_NE(a.train[0].image, c.train[0].image);
}

TEST(Dataset, OneClassIsConfigError) {
  SyntheticTaskSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(generate_dataset(spec, 1), ConfigError);
}

TEST(Dataset, SplitsAreDisjointAndBalanced) {
  SyntheticTaskSpec spec;
  const auto ds = generate_dataset(spec, 19);
  std::set<std::uint64_t> ids;
  std::vector<std::vector<double>> freq;
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    std::vector<double> f(spec.num_classes, 0.0);
    for (const auto& s : *split) {
      EXPECT_TRUE(ids.insert(s.id).second);
      f[s.labels[0]] += 1.0 / split->size();
    }
    freq.push_back(f);
  }
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    EXPECT_LT(std::abs(freq[0][c] - freq[1][c]), 0.05);
    EXPECT_LT(std::abs(freq[0][c] - freq[2][c]), 0.05);
  }
}

TEST(Dataset, NoiseFreeRgbIsIdenticalForClassesDifferingOnlyInNir) {
  SyntheticTaskSpec spec;
  spec.num_classes = 2;
  spec.bands = {"red", "green", "blue", "nir"};
  spec.noise = 0;
  spec.class_spectra = {{0.3, 0.2, 0.1, 0.2}, {0.3, 0.2, 0.1, 0.7}};
  const auto spectra = class_spectra(spec, 20);
  const auto a = synthesize(spec, spectra, 0, 21, 5), b = synthesize(spec, spectra, 1, 21, 5);
  const std::size_t px = 32 * 32;
  for (std::size_t i = 0; i < 3 * px; ++i) EXPECT_EQ(a.image.data[i], b.image.data[i]);
  EXPECT_NE(a.image.data[3 * px], b.image.data[3 * px]);
}

TEST(Dataset, AmbiguousClassesShareRgbMeans) {
  SyntheticTaskSpec spec;
  const auto spectra = class_spectra(spec, 22);
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(spectra[0][b], spectra[1][b]);
  for (std::size_t c = 2; c < spec.num_classes; ++c) EXPECT_NE(spectra[0], spectra[c]);
}

TEST(Dataset, NearestCentroidSeparatesOnNonRgbBandsOnly) {
  SyntheticTaskSpec spec;
  const auto ds = generate_dataset(spec, 23);
  const std::vector<int> all{0, 1, 2, 3}, ambiguous{0, 1};
  EXPECT_GE(nearest_centroid(ds.train, ds.test, {3, 4, 5}, all), 0.95);
  EXPECT_LE(nearest_centroid(ds.train, ds.test, {0, 1, 2}, ambiguous), 1.0 / 2 + 0.15);
}

TEST(Dataset, SegmentationLabelsFollowBlobs) {
  SyntheticTaskSpec spec;
  spec.task = TaskKind::segmentation;
  spec.train_size = spec.val_size = spec.test_size = 4;
  const auto ds = generate_dataset(spec, 24);
  for (const auto& s : ds.train) {
    ASSERT_EQ(s.labels.size(), 32u * 32u);
    for (int l : s.labels) EXPECT_LT(l, 4);
  }
}

TEST(Dataset, SaveLoadRoundTrip) {
  for (auto task : {TaskKind::classification, TaskKind::segmentation}) {
    SyntheticTaskSpec spec;
    spec.task = task;
    spec.image_size = 16;
    spec.train_size = 5;
    spec.val_size = spec.test_size = 3;
    const auto ds = generate_dataset(spec, 25);
    const auto dir = scratch("dataset");
    save_dataset(dir, ds);
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.task, task);
    EXPECT_EQ(back.num_classes, 4u);
    ASSERT_EQ(back.train.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(back.train[i].id, ds.train[i].id);
      EXPECT_EQ(back.train[i].image, ds.train[i].image);
      EXPECT_EQ(back.train[i].labels, ds.train[i].labels);
    }
  }
}

TEST(Dataset, MalformedManifestIsFormatError) {
  const auto dir = scratch("manifest");
  write_text_atomic(dir / "manifest.txt", "hello\n");
  EXPECT_THROW(load_dataset(dir), FormatError);
  EXPECT_THROW(load_dataset(dir / "missing"), FormatError);
}
