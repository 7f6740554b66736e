#include <gtest/gtest.h>

#include <cmath>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"
#include "djpq/network.hpp"
#include "djpq/trainer.hpp"
#include "test_util.hpp"

using namespace djpq;
using djpq::testing::randn;
using djpq::testing::to_vector;

namespace {

LayerConfig layer(const std::string& name, LayerKind kind, int out) {
  LayerConfig c;
  c.name = name;
  c.kind = kind;
  c.out_channels = out;
  c.padding = kind == LayerKind::kConv ? 1 : 0;
  return c;
}

// conv1 (bn, relu, gate) -> conv2 (relu, gate, pool) -> fc
ArchSpec toy_arch() {
  ArchSpec a;
  a.name = "toy";
  a.in_channels = 2;
  a.in_height = a.in_width = 6;
  auto c1 = layer("conv1", LayerKind::kConv, 4);
  c1.batchnorm = true;
  c1.relu = true;
  c1.gated = true;
  c1.bias = false;
  auto c2 = layer("conv2", LayerKind::kConv, 3);
  c2.relu = true;
  c2.gated = true;
  c2.pool = PoolKind::kMax;
  auto fc = layer("fc", LayerKind::kDense, 5);
  a.layers = {c1, c2, fc};
  return a;
}

// Two gated convs where the second adds the first.
ArchSpec residual_arch() {
  ArchSpec a;
  a.name = "res";
  a.in_channels = 1;
  a.in_height = a.in_width = 4;
  auto c1 = layer("a", LayerKind::kConv, 3);
  c1.relu = true;
  c1.gated = true;
  auto c2 = layer("b", LayerKind::kConv, 3);
  c2.relu = true;
  c2.gated = true;
  c2.add = "a";
  c2.pool = PoolKind::kGlobalAvg;
  a.layers = {c1, c2, layer("fc", LayerKind::kDense, 2)};
  return a;
}

NetworkGraph gated(const ArchSpec& a, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  NetworkGraph g = build_network(a, rng);
  attach_gates(g, GateInit{1.0f, 0.5f, 1e-3f, 1e-2f});
  return g;
}

Tensor eval(NetworkGraph& g, const Tensor& x) {
  NoGradGuard guard;
  return forward(g, x, ForwardOptions{});
}

}  // namespace

TEST(InferShapes, ToyNetwork) {
  NetworkGraph g = baseline_graph(toy_arch());
  EXPECT_EQ(g.layers[0].out_shape, (Shape{4, 6, 6}));
  EXPECT_EQ(g.layers[1].out_shape, (Shape{3, 3, 3}));
  EXPECT_EQ(g.layers[2].in_channels, 3u);
  EXPECT_EQ(g.layers[2].in_spatial, 9u);
  EXPECT_EQ(g.layers[2].fan_in(), 27u);
  EXPECT_EQ(g.num_classes(), 5u);
}

TEST(InferShapes, BundledVggMini) {
  NetworkGraph g = baseline_graph(load_arch(std::string(DJPQ_SOURCE_DIR) + "/arch/vgg_mini.arch"));
  EXPECT_EQ(g.layers.back().fan_in(), 64u * 3 * 3);
  EXPECT_EQ(g.layers[0].map_h, 28u);
  EXPECT_EQ(g.layers[3].map_h, 7u);
}

TEST(InferShapes, RejectsBadTopologies) {
  auto a = toy_arch();
  a.layers[1].name = "conv1";
  EXPECT_THROW(baseline_graph(a), StructuralError);
  a = toy_arch();
  a.layers[2].gated = true;
  EXPECT_THROW(baseline_graph(a), StructuralError);
  a = toy_arch();
  a.layers[1].input = "later";
  EXPECT_THROW(baseline_graph(a), StructuralError);
  a = toy_arch();
  a.layers[0].kernel = 9;
  a.layers[0].padding = 0;
  EXPECT_THROW(baseline_graph(a), StructuralError);
  a = residual_arch();
  a.layers[1].out_channels = 4;
  try {
    baseline_graph(a);
    FAIL();
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("residual source 'a'"), std::string::npos);
  }
}

TEST(Network, ForwardShapeAndDeterminism) {
  NetworkGraph g = gated(toy_arch());
  std::mt19937_64 rng(2);
  Tensor x = randn({3, 2, 6, 6}, rng);
  Tensor y = eval(g, x);
  EXPECT_EQ(y.shape(), (Shape{3, 5}));
  EXPECT_EQ(to_vector(y), to_vector(eval(g, x)));
}

TEST(Network, CloneIsIndependent) {
  NetworkGraph g = gated(toy_arch());
  NetworkGraph c = clone_graph(g);
  c.layers[0].weight.data()[0] += 1.0f;
  c.gates[0].mu.data()[0] = -3.0f;
  EXPECT_NE(c.layers[0].weight.data()[0], g.layers[0].weight.data()[0]);
  EXPECT_EQ(g.gates[0].mu.data()[0], 1.0f);
}

TEST(Network, ResidualLayersShareTheSourceGate) {
  NetworkGraph g = gated(residual_arch());
  EXPECT_EQ(g.gates.size(), 1u);
  EXPECT_EQ(g.layers[0].gate, 0);
  EXPECT_EQ(g.layers[1].gate, 0);
}

TEST(HardPruning, OnePrunedChannelShrinksItsConsumer) {
  NetworkGraph g = gated(toy_arch());
  g.gates[0].mu.data()[2] = 0.0f;
  NetworkGraph p = apply_hard_pruning(g);
  EXPECT_EQ(p.layers[0].out_channels(), 3u);
  EXPECT_EQ(p.layers[1].in_channels, 3u);
  EXPECT_EQ(p.layers[1].weight.shape(), (Shape{3, 3, 3, 3}));
  EXPECT_EQ(p.layers[0].bn_gamma.numel(), 3u);
  EXPECT_FALSE(p.has_gates());
  // Surviving filters are copied unchanged apart from the removed input slice.
  const auto& w = g.layers[1].weight.data();
  const auto& pw = p.layers[1].weight.data();
  EXPECT_EQ(pw[0], w[0]);
  EXPECT_EQ(pw[2 * 9], w[3 * 9]);
}

TEST(HardPruning, ZeroMeanGatesGiveTheSameOutputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    NetworkGraph g = gated(toy_arch(), 10 + trial);
    for (auto& gate : g.gates) {
      for (std::size_t c = 0; c < gate.channels(); ++c) {
        gate.mu.data()[c] = std::uniform_real_distribution<float>(0.5f, 1.5f)(rng);
      }
    }
    g.gates[0].mu.data()[1] = 0.0f;
    g.gates[0].sigma.data()[1] = 1e-8f;
    g.gates[1].mu.data()[0] = 0.0f;
    g.gates[1].sigma.data()[0] = 1e-8f;
    // Non-trivial batch-norm state so folding is exercised.
    for (std::size_t c = 0; c < 4; ++c) {
      g.layers[0].bn_gamma.data()[c] = 0.5f + 0.25f * static_cast<float>(c);
      g.layers[0].bn_beta.data()[c] = 0.1f * static_cast<float>(c);
      g.layers[0].bn_stats.running_mean[c] = 0.05f * static_cast<float>(c);
      g.layers[0].bn_stats.running_var[c] = 1.0f + 0.2f * static_cast<float>(c);
    }
    NetworkGraph p = apply_hard_pruning(g);
    Tensor x = randn({4, 2, 6, 6}, rng);
    const auto a = to_vector(eval(g, x)), b = to_vector(eval(p, x));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
  }
}

TEST(HardPruning, AllChannelsPrunedIsStructuralError) {
  NetworkGraph g = gated(toy_arch());
  for (float& m : g.gates[1].mu.data()) m = 0.0f;
  try {
    apply_hard_pruning(g);
    FAIL();
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("conv2"), std::string::npos);
  }
}

TEST(HardPruning, NothingPrunedKeepsShapes) {
  NetworkGraph g = gated(toy_arch());
  NetworkGraph p = apply_hard_pruning(g);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    EXPECT_EQ(p.layers[i].weight.shape(), g.layers[i].weight.shape());
  }
  std::mt19937_64 rng(4);
  Tensor x = randn({2, 2, 6, 6}, rng);
  const auto a = to_vector(eval(g, x)), b = to_vector(eval(p, x));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(HardPruning, ResidualPairPrunesTogether) {
  NetworkGraph g = gated(residual_arch());
  g.gates[0].mu.data()[1] = 0.0f;
  NetworkGraph p = apply_hard_pruning(g);
  EXPECT_EQ(p.layers[0].out_channels(), 2u);
  EXPECT_EQ(p.layers[1].out_channels(), 2u);
  EXPECT_EQ(p.layers[2].fan_in(), 2u);
}

TEST(ModelReport, UncompressedFloatNetworkHasUnitRatios) {
  const ArchSpec a = toy_arch();
  std::mt19937_64 rng(5);
  NetworkGraph g = build_network(a, rng);
  const auto r = model_report(g, baseline_graph(a), 0.5);
  EXPECT_EQ(r.mac_ratio, 1.0);
  EXPECT_EQ(r.bop_ratio, 1.0);
  EXPECT_EQ(r.totals.bops, 1024.0 * r.totals.macs);
  EXPECT_EQ(r.accuracy, 0.5);
}

TEST(ModelReport, PrunedChannelsCountInBothLayers) {
  const ArchSpec a = toy_arch();
  NetworkGraph g = gated(a);
  g.gates[0].mu.data()[0] = 0.0f;
  g.gates[0].mu.data()[1] = 0.0f;
  const auto r = model_report(apply_hard_pruning(g), baseline_graph(a), 0.0);
  EXPECT_DOUBLE_EQ(r.layers[0].p_l, 0.5);
  EXPECT_DOUBLE_EQ(r.layers[1].P_l, 0.5);
  EXPECT_DOUBLE_EQ(r.layers[1].macs, 2.0 * 3 * 36 * 9);
  // Gated but unpruned network reports the same as its pruned export.
  const auto direct = model_report(g, baseline_graph(a), 0.0);
  EXPECT_EQ(direct.totals, r.totals);
}

TEST(ModelReport, MisalignedGraphs) {
  std::mt19937_64 rng(6);
  NetworkGraph g = build_network(toy_arch(), rng);
  EXPECT_THROW(model_report(g, baseline_graph(residual_arch()), 0.0), StructuralError);
}
