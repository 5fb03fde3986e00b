#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "deflect/diagnostics.hpp"
#include "deflect/peft.hpp"
#include "test_support.hpp"

using namespace deflect;
using namespace deflect::testing;

namespace {

const std::vector<MethodKind> kAll{MethodKind::frozen, MethodKind::full,     MethodKind::lora,
                                   MethodKind::bitfit, MethodKind::normtune, MethodKind::deflect};

ModelConfig large_config(MethodKind kind) {
  ModelConfig mc;
  mc.vit = vit_large();
  mc.bands = sentinel2_bands();
  mc.adapter.layers = AdapterConfig::default_layers(24);
  mc.method = PeftMethod::defaults(kind);
  return mc;
}

double fraction(MethodKind kind) { return count_parameters(model_layout(large_config(kind))).tuned_fraction(); }

// Logits of a copy of `kind` with RGB input, trainable tensors left at their initial values.
std::vector<double> rgb_logits(MethodKind kind, const ParameterSet<double>& pre, const Sample& s,
                               const std::vector<double>& head) {
  auto mc = tiny_config(kind);
  mc.method.input = StemInput::rgb;
  Model<double> m(mc, pre, 3);
  m.assign("head.weight", head);
  return m.logits(s.image, s.id).values();
}

}  // namespace

TEST(Partition, DisjointAndExhaustiveForEveryMethod) {
  for (auto kind : kAll) {
    auto mc = tiny_config(kind);
    auto layout = model_layout(mc);
    std::set<std::string> names;
    std::size_t total = 0;
    for (const auto& s : layout) {
      EXPECT_TRUE(names.insert(s.name).second) << s.name;
      total += s.count();
    }
    auto c = count_parameters(layout);
    EXPECT_EQ(c.theta_p + c.theta_a + c.phi, total) << method_name(kind);
    Model<double> model(mc, random_pretrained<double>(mc.vit, 1), 2);
    EXPECT_EQ(model.parameters().layout().size(), layout.size());
    EXPECT_EQ(model.parameters().count().theta_a, c.theta_a);
  }
}

TEST(Partition, GroupsFollowTheMethod) {
  // Kinds of the encoder's own tensors that become trainable.
  auto trainable_kinds = [](MethodKind kind) {
    std::set<ParamKind> kinds;
    for (const auto& s : encoder_layout(tiny_config(kind).encoder_config())) {
      auto layout = model_layout(tiny_config(kind));
      auto it = std::find_if(layout.begin(), layout.end(), [&](const ParamSpec& p) { return p.name == s.name; });
      if (it->group == ParamGroup::adapter) kinds.insert(it->kind);
    }
    return kinds;
  };
  EXPECT_TRUE(trainable_kinds(MethodKind::frozen).empty());
  EXPECT_EQ(trainable_kinds(MethodKind::bitfit), (std::set<ParamKind>{ParamKind::bias, ParamKind::norm_bias}));
  EXPECT_EQ(trainable_kinds(MethodKind::normtune), (std::set<ParamKind>{ParamKind::norm_gain, ParamKind::norm_bias}));
  EXPECT_EQ(count_parameters(model_layout(tiny_config(MethodKind::full))).theta_p, 0u);
  for (auto kind : {MethodKind::lora, MethodKind::deflect}) {
    for (const auto& s : model_layout(tiny_config(kind)))
      if (s.group == ParamGroup::adapter) {
        EXPECT_TRUE(s.name.find(kind == MethodKind::lora ? ".lora_" : "") != std::string::npos) << s.name;
      }
  }
  EXPECT_EQ(count_parameters(model_layout(tiny_config(MethodKind::frozen))).tuned_fraction(), 0.0);
}

TEST(Partition, OverlapIsIntegrityError) {
  auto layout = model_layout(tiny_config(MethodKind::bitfit));
  layout.push_back(layout.front());
  layout.back().group = ParamGroup::adapter;
  EXPECT_THROW(count_parameters(layout), IntegrityError);
}

TEST(Gradients, OnlyTheMethodsTensorsReceiveGradient) {
  auto data = tiny_dataset(4);
  const auto& s = data.train.front();
  for (auto kind : {MethodKind::bitfit, MethodKind::normtune, MethodKind::lora}) {
    auto mc = tiny_config(kind);
    Model<double> model(mc, random_pretrained<double>(mc.vit, 5), 6);
    perturb_trainable(model, 0.05, 7);
    cross_entropy(model.logits(s.image, s.id), s.labels).backward();
    for (const auto& e : model.parameters().entries()) {
      const bool trainable = e.spec.group != ParamGroup::pretrained;
      EXPECT_EQ(e.tensor.has_grad(), trainable) << method_name(kind) << " " << e.spec.name;
      if (kind != MethodKind::lora && e.spec.name.find(".attn.") != std::string::npos &&
          e.spec.kind == ParamKind::weight) {
        EXPECT_FALSE(e.tensor.has_grad()) << e.spec.name;
      }
    }
  }
}

TEST(Baselines, UntrainedMethodsMatchFrozen) {
  auto data = tiny_dataset(8);
  const auto pre = random_pretrained<double>(small_vit(4, 16, 2), 9);
  Model<double> reference(tiny_config(MethodKind::frozen), pre, 3);
  const auto head = reference.parameters().at("head.weight").values();
  for (const auto& s : data.test) {
    const auto frozen = rgb_logits(MethodKind::frozen, pre, s, head);
    for (auto kind : {MethodKind::lora, MethodKind::bitfit, MethodKind::normtune, MethodKind::full})
      EXPECT_EQ(rgb_logits(kind, pre, s, head), frozen) << method_name(kind);
  }
}

TEST(Lora, MergedWeightIsExactSum) {
  auto vit = small_vit(2, 16, 2);
  ParameterSet<double> ps;
  auto rng = derive_rng(10, 0);
  auto enc = make_encoder(ps, vit, rng);
  apply_lora(ps, enc, 3, {"q", "k", "v"}, rng);
  auto& q = enc.blocks[1].q;
  auto brng = derive_rng(11, 0);
  auto vals = normal_values<double>(q.lora_b->size(), 0.5, brng);
  std::copy(vals.begin(), vals.end(), q.lora_b->data().begin());
  const auto merged = merged_weight(q);
  const auto ab = matmul(*q.lora_a, *q.lora_b);
  for (std::size_t i = 0; i < merged.size(); ++i)
    EXPECT_EQ(merged.data()[i], q.weight.data()[i] + ab.data()[i]);
  auto x = random_tensor({4, 16}, 12, 1.0, false);
  auto direct = linear(x, q);
  auto via_merged = add_bias(matmul(x, merged), q.bias);
  EXPECT_LT(max_abs_diff(direct.data(), via_merged.data()), 1e-12);
  const auto sv = singular_values(ab);
  for (std::size_t i = 3; i < sv.size(); ++i) EXPECT_LT(sv[i], 1e-6 * sv[0]);
  EXPECT_FALSE(enc.blocks[0].o.lora_a.has_value());
}

TEST(Lora, LayoutCoversTargetsOfEveryLayer) {
  auto vit = small_vit(3, 16, 2);
  const auto layout = lora_layout(vit, 4, {"q", "fc1", "fc2"});
  EXPECT_EQ(layout.size(), 3u * 3u * 2u);
  ParameterCount c = count_parameters(layout);
  EXPECT_EQ(c.theta_a, 3u * ((16 + 16) * 4 + (16 + 64) * 4 + (64 + 16) * 4));
}

TEST(Lora, ValidationRejectsBadTargets) {
  auto m = PeftMethod::defaults(MethodKind::lora);
  m.lora_targets = {"q", "w"};
  EXPECT_THROW(m.validate(), ConfigError);
  m.lora_targets = {};
  EXPECT_THROW(m.validate(), ConfigError);
  m.lora_targets = {"q"};
  m.lora_rank = 0;
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(Methods, ParseAndDefaults) {
  for (auto kind : kAll) EXPECT_EQ(parse_method(method_name(kind)), kind);
  EXPECT_THROW(parse_method("slr"), ConfigError);
  EXPECT_EQ(PeftMethod::defaults(MethodKind::deflect).input, StemInput::rgb);
  EXPECT_EQ(PeftMethod::defaults(MethodKind::lora).input, StemInput::all);
  auto bad = PeftMethod::defaults(MethodKind::deflect);
  bad.input = StemInput::all;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(StemInit, ThreeChannelsCopyTheRgbStem) {
  auto rgb = random_tensor({3 * 4, 5}, 13, 1.0, false);
  for (auto strategy : {StemInit::repeat, StemInit::rgb_plus_random}) {
    auto rng = derive_rng(14, 0);
    EXPECT_EQ(multispectral_stem_init(rgb, 3, strategy, rng), rgb.values());
  }
}

TEST(StemInit, RepeatTilesCyclically) {
  auto rgb = random_tensor({3 * 4, 5}, 15, 1.0, false);
  auto rng = derive_rng(16, 0);
  const auto w6 = multispectral_stem_init(rgb, 6, StemInit::repeat, rng);
  const std::size_t block = 4 * 5;
  for (std::size_t c = 3; c < 6; ++c)
    for (std::size_t i = 0; i < block; ++i) EXPECT_EQ(w6[c * block + i], w6[(c - 3) * block + i]);
  const auto w7 = multispectral_stem_init(rgb, 7, StemInit::repeat, rng);
  for (std::size_t i = 0; i < block; ++i) EXPECT_EQ(w7[6 * block + i], rgb.data()[i]);
}

TEST(StemInit, RandomExtrasAreMaskedByZeroBands) {
  auto vit = small_vit(1, 8, 2);
  auto enc = random_encoder(vit, 17);
  auto rng = derive_rng(18, 0);
  const std::size_t rows = enc.stem.weight.rows() * 2;
  Linear<double> stem6{Tensord({rows, 8}, multispectral_stem_init(enc.stem.weight, 6, StemInit::rgb_plus_random, rng)),
                       enc.stem.bias, std::nullopt, std::nullopt};
  EXPECT_NE(stem6.weight.at(rows - 1, 0), stem6.weight.at(rows / 2 - 1, 0));
  auto img = random_image(16, six_bands(), 19);
  for (std::size_t c = 3; c < 6; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) img.at(c, y, x) = 0.0f;
  auto six = patch_embed(extract_patches<double>(img, stem_channel_order(img), 8), stem6, enc.pos);
  auto three = patch_embed_rgb(img, enc);
  EXPECT_LT(max_abs_diff(six.data(), three.data()), 1e-12);
}

TEST(StemInit, TooFewChannelsIsConfigError) {
  auto rgb = random_tensor({3, 2}, 20, 1.0, false);
  auto rng = derive_rng(21, 0);
  EXPECT_THROW(multispectral_stem_init(rgb, 2, StemInit::repeat, rng), ConfigError);
}

TEST(StemInit, ChannelOrderPutsRgbFirst) {
  MultispectralImage img(5, 1, 1, {"nir", "blue", "swir1", "red", "green"});
  EXPECT_EQ(stem_channel_order(img), (std::vector<std::size_t>{3, 4, 1, 0, 2}));
}

TEST(Entanglement, RandomInstanceExpansionsAgree) {
  auto rep = algebra_identities(22, 10);
  EXPECT_LT(rep.lora_four_term, 1e-10);
  EXPECT_LT(rep.lora_expanded, 1e-10);
}

TEST(Entanglement, ZeroSpectralEmbeddingRemovesCrossTerms) {
  auto xp = random_tensor({5, 8}, 23, 1.0, false);
  auto wq = random_tensor({8, 8}, 24, 0.3, false), wk = random_tensor({8, 8}, 25, 0.3, false);
  auto dq = random_tensor({8, 8}, 26, 0.1, false), dk = random_tensor({8, 8}, 27, 0.1, false);
  auto rep = entanglement_diagnostic(xp, Tensord::zeros({5, 8}), wq, wk, dq, dk);
  EXPECT_LT(rep.eq8_max_abs_error, 1e-10);
  for (const auto& [name, norm] : rep.term_norms) {
    if (name.find("xA") != std::string::npos) EXPECT_EQ(norm, 0.0) << name;
    else EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Entanglement, ZeroUpdateLeavesPretrainedTerms) {
  auto xp = random_tensor({5, 8}, 28, 1.0, false), xa = random_tensor({5, 8}, 29, 1.0, false);
  auto wq = random_tensor({8, 8}, 30, 0.3, false), wk = random_tensor({8, 8}, 31, 0.3, false);
  auto rep = entanglement_diagnostic(xp, xa, wq, wk, Tensord::zeros({8, 8}), Tensord::zeros({8, 8}));
  EXPECT_LT(rep.eq7_max_abs_error, 1e-10);
  std::size_t nonzero = 0;
  for (const auto& [name, norm] : rep.term_norms) {
    if (name.find("dW") != std::string::npos) EXPECT_EQ(norm, 0.0) << name;
    else nonzero += norm > 0;
  }
  EXPECT_EQ(nonzero, 4u);
}

TEST(Budget, LargeModelFractions) {
  const double normtune = fraction(MethodKind::normtune), bitfit = fraction(MethodKind::bitfit);
  const double deflect = fraction(MethodKind::deflect), lora = fraction(MethodKind::lora);
  EXPECT_LT(normtune, bitfit);
  EXPECT_LT(bitfit, deflect);
  EXPECT_LT(deflect, lora);
  EXPECT_NEAR(bitfit, 0.0009, 0.0001);
  EXPECT_NEAR(normtune, 0.0003, 0.00005);
  EXPECT_GE(deflect, 0.0015);
  EXPECT_LE(deflect, 0.0030);
  // Q/K/V at rank 16 over 24 layers of width 1024.
  const auto c = count_parameters(model_layout(large_config(MethodKind::lora)));
  EXPECT_EQ(c.theta_a, 24u * 3u * 2u * 1024u * 16u);
}

TEST(Budget, DeflectFractionGrowsWithRank) {
  std::vector<double> f;
  for (std::size_t r : {8, 16, 32}) {
    auto mc = large_config(MethodKind::deflect);
    mc.adapter.rank = r;
    f.push_back(count_parameters(model_layout(mc)).tuned_fraction());
  }
  EXPECT_LT(f[0], f[1]);
  EXPECT_LT(f[1], f[2]);
}
