#include <doctest.h>

#include <cmath>
#include <random>

#include "checks.hpp"
#include "lungct/blocks.hpp"
#include "lungct/nn.hpp"

using lungct::DenseBlock;
using lungct::DenseBlockSpec;
using lungct::FpnFuse;
using lungct::FpnSpec;
using lungct::SeBlock;
using lungct::Tensor;
using testutil::random_tensor;

// ---------------------------------------------------------------------------
// Dense connectivity

TEST_CASE("dense block: output channels = input + L*k") {
  std::mt19937 rng(1);
  DenseBlock block({.input_channels = 4, .growth_rate = 2, .num_layers = 3}, rng);
  Tensor x = random_tensor({5, 5, 4}, rng);
  Tensor y = lungct::dense_block_forward(block, x);
  CHECK(y.dim(0) == 5);
  CHECK(y.dim(1) == 5);
  CHECK(y.dim(2) == 10);  // 4 + 3*2
}

TEST_CASE("dense block: L=0 is the identity") {
  std::mt19937 rng(2);
  DenseBlock block({.input_channels = 3, .growth_rate = 4, .num_layers = 0}, rng);
  Tensor x = random_tensor({4, 4, 3}, rng);
  Tensor y = lungct::dense_block_forward(block, x);
  REQUIRE(y.same_shape(x));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("dense block: zeroed transform weights append zero channels, input preserved") {
  std::mt19937 rng(3);
  DenseBlockSpec spec{.input_channels = 3, .growth_rate = 2, .num_layers = 2};
  DenseBlock block(spec, rng);
  for (int l = 0; l < spec.num_layers; ++l) {
    std::vector<lungct::ParamRef> params;
    block.layer_transform(l).collect_params("t", params);
    for (auto& p : params) {
      if (p.name.find("/w") != std::string::npos) p.value->zero();
    }
  }
  Tensor x = random_tensor({6, 6, 3}, rng, 0.0, 1.0);
  Tensor y = lungct::dense_block_forward(block, x);
  REQUIRE(y.dim(2) == 7);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      for (int c = 0; c < 3; ++c) CHECK(y.at(i, j, c) == x.at(i, j, c));
      for (int c = 3; c < 7; ++c) CHECK(y.at(i, j, c) == 0.0);
    }
  }
}

TEST_CASE("dense block: channel count law on 20 random specs") {
  std::mt19937 rng(4);
  std::uniform_int_distribution<int> c0_dist(1, 8), k_dist(1, 6), l_dist(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    int c0 = c0_dist(rng), k = k_dist(rng), L = l_dist(rng);
    DenseBlock block({.input_channels = c0, .growth_rate = k, .num_layers = L}, rng);
    Tensor x = random_tensor({3, 3, c0}, rng);
    Tensor y = lungct::dense_block_forward(block, x);
    CHECK(y.dim(2) == c0 + L * k);
    CHECK(y.dim(0) == 3);
    CHECK(y.dim(1) == 3);
  }
}

TEST_CASE("dense block: ablating layer j perturbs the input of every later layer") {
  std::mt19937 rng(5);
  DenseBlock block({.input_channels = 2, .growth_rate = 3, .num_layers = 3}, rng);
  Tensor x = random_tensor({1, 4, 4, 2}, rng, 0.1, 1.0);
  std::vector<Tensor> base_inputs, ablated_inputs;
  block.forward_instrumented(x, -1, &base_inputs);
  const int j = 0;
  block.forward_instrumented(x, j, &ablated_inputs);
  REQUIRE(base_inputs.size() == 3);
  for (int l = j + 1; l < 3; ++l) {
    double diff = 0.0;
    for (std::size_t i = 0; i < base_inputs[l].size(); ++i) {
      diff = std::max(diff, std::abs(base_inputs[l][i] - ablated_inputs[l][i]));
    }
    CHECK(diff > 1e-8);  // every later layer sees a changed concatenation
  }
  // the layers at or before j see identical inputs
  for (int l = 0; l <= j; ++l) {
    for (std::size_t i = 0; i < base_inputs[l].size(); ++i) {
      CHECK(base_inputs[l][i] == ablated_inputs[l][i]);
    }
  }
}

TEST_CASE("dense block: channel mismatch throws") {
  std::mt19937 rng(6);
  DenseBlock block({.input_channels = 4, .growth_rate = 2, .num_layers = 1}, rng);
  Tensor x = random_tensor({4, 4, 3}, rng);
  CHECK_THROWS_AS(lungct::dense_block_forward(block, x), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Squeeze-and-Excitation

TEST_CASE("se block: zero weights gate everything at exactly 0.5") {
  std::mt19937 rng(7);
  SeBlock se(4, 2, rng);
  se.w1().zero();
  se.w2().zero();
  Tensor x = random_tensor({5, 3, 4}, rng);
  Tensor y = lungct::se_block(se, x);
  REQUIRE(y.same_shape(x));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == 0.5 * x[i]);
}

TEST_CASE("se block: saturated gates pass the input through") {
  std::mt19937 rng(8);
  SeBlock se(4, 2, rng);
  se.w1().fill(10.0);
  se.w2().fill(10.0);
  Tensor x({2, 2, 4}, 1.0);  // squeeze = 1 per channel -> pre-sigmoid = 10*4*2*10 >> 40
  Tensor y = lungct::se_block(se, x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) <= 1e-15);
}

TEST_CASE("se block: two-channel case matches hand evaluation") {
  std::mt19937 rng(9);
  SeBlock se(2, 2, rng);  // reduced dim 1
  const double a1 = 0.3, a2 = -0.2, b1 = 1.5, b2 = 0.7;
  se.w1().at(0, 0) = a1;
  se.w1().at(1, 0) = a2;
  se.w2().at(0, 0) = b1;
  se.w2().at(0, 1) = b2;
  // one spatial cell, channel means (1, 2)
  Tensor x({1, 1, 2});
  x.at(0, 0, 0) = 1.0;
  x.at(0, 0, 1) = 2.0;
  Tensor y = lungct::se_block(se, x);
  double hidden = std::max(0.0, 1.0 * a1 + 2.0 * a2);
  double g1 = 1.0 / (1.0 + std::exp(-(hidden * b1)));
  double g2 = 1.0 / (1.0 + std::exp(-(hidden * b2)));
  CHECK(y.at(0, 0, 0) == doctest::Approx(1.0 * g1).epsilon(1e-12));
  CHECK(y.at(0, 0, 1) == doctest::Approx(2.0 * g2).epsilon(1e-12));
}

TEST_CASE("se block: gates stay in (0,1) on random tensors") {
  std::mt19937 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    SeBlock se(6, 3, rng);
    Tensor x = random_tensor({4, 4, 6}, rng, -2.0, 2.0);
    Tensor y = lungct::se_block(se, x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(std::abs(y[i]) <= std::abs(x[i]));
      if (x[i] != 0.0) CHECK(y[i] * x[i] >= 0.0);  // same sign
    }
  }
}

TEST_CASE("se block: analytic input gradient matches finite differences") {
  std::mt19937 rng(11);
  SeBlock se(4, 2, rng);
  Tensor x = random_tensor({1, 3, 3, 4}, rng, -1.0, 1.0);
  Tensor loss_w = random_tensor({1, 3, 3, 4}, rng, -1.0, 1.0);
  auto loss = [&]() {
    Tensor y = se.forward(x, false);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += loss_w[i] * y[i];
    return s;
  };
  loss();  // populate caches
  Tensor analytic = se.backward(loss_w);
  double worst = testutil::max_grad_rel_err(loss, x, analytic, 1e-6);
  CHECK(worst < 1e-4);
}

TEST_CASE("se block: ratio must divide channels") {
  std::mt19937 rng(12);
  CHECK_THROWS_AS(SeBlock(6, 4, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Feature pyramid fusion

TEST_CASE("fpn: single level maps (7,7,1664) to (7,7,256)") {
  std::mt19937 rng(13);
  FpnFuse fpn({.pyramid_channels = 256, .num_levels = 1}, {1664}, rng);
  Tensor f = random_tensor({7, 7, 1664}, rng);
  auto fused = lungct::fpn_fuse(fpn, {f});
  REQUIRE(fused.size() == 1);
  CHECK(fused[0].dim(0) == 7);
  CHECK(fused[0].dim(1) == 7);
  CHECK(fused[0].dim(2) == 256);
}

TEST_CASE("fpn: zero coarse level leaves the fine path untouched") {
  std::mt19937 rng(14);
  FpnFuse fpn({.pyramid_channels = 8, .num_levels = 2}, {5, 5}, rng);
  Tensor coarse({1, 4, 4, 5});
  Tensor fine = random_tensor({1, 8, 8, 5}, rng);
  auto fused = fpn.forward({coarse, fine}, false);
  // with bias-free convs the coarse pathway contributes exactly nothing
  Tensor expected = fpn.output_conv(1).forward(fpn.lateral(1).forward(fine, false), false);
  REQUIRE(fused[1].same_shape(expected));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(fused[1][i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < fused[0].size(); ++i) CHECK(fused[0][i] == 0.0);
}

TEST_CASE("fpn: two levels (4,4) and (8,8) produce pyramid-width outputs") {
  std::mt19937 rng(15);
  FpnFuse fpn({.pyramid_channels = 256, .num_levels = 2}, {12, 12}, rng);
  Tensor coarse = random_tensor({4, 4, 12}, rng);
  Tensor fine = random_tensor({8, 8, 12}, rng);
  auto fused = lungct::fpn_fuse(fpn, {coarse, fine});
  CHECK(fused[0].dim(0) == 4);
  CHECK(fused[0].dim(2) == 256);
  CHECK(fused[1].dim(0) == 8);
  CHECK(fused[1].dim(2) == 256);
}

TEST_CASE("fpn: channel contract across randomized chains") {
  std::mt19937 rng(16);
  std::uniform_int_distribution<int> ch_dist(1, 9), p_dist(2, 24), base_dist(2, 5);
  for (int trial = 0; trial < 10; ++trial) {
    int num_levels = 1 + trial % 3;
    int pyramid = p_dist(rng);
    std::vector<int> chans;
    std::vector<Tensor> levels;
    // build fine -> coarse then reverse; fine size may be odd
    int fine = 2 * base_dist(rng) + trial % 2 * 3;
    std::vector<int> sizes(num_levels);
    sizes[num_levels - 1] = fine;
    for (int i = num_levels - 2; i >= 0; --i) sizes[i] = (sizes[i + 1] + 1) / 2;
    for (int i = 0; i < num_levels; ++i) {
      chans.push_back(ch_dist(rng));
      levels.push_back(random_tensor({sizes[i], sizes[i], chans.back()}, rng));
    }
    FpnFuse fpn({.pyramid_channels = pyramid, .num_levels = num_levels}, chans, rng);
    auto fused = lungct::fpn_fuse(fpn, levels);
    for (int i = 0; i < num_levels; ++i) {
      CHECK(fused[i].dim(2) == pyramid);
      CHECK(fused[i].dim(0) == sizes[i]);
    }
  }
}

TEST_CASE("fpn: non-factor-2 chain rejected") {
  std::mt19937 rng(17);
  FpnFuse fpn({.pyramid_channels = 4, .num_levels = 2}, {3, 3}, rng);
  Tensor coarse = random_tensor({3, 3, 3}, rng);
  Tensor fine = random_tensor({8, 8, 3}, rng);
  CHECK_THROWS_AS(fpn.forward({coarse, fine}, false), std::invalid_argument);
}

TEST_CASE("fpn: backward matches finite differences through the odd-size crop") {
  std::mt19937 rng(18);
  FpnFuse fpn({.pyramid_channels = 3, .num_levels = 2}, {2, 2}, rng);
  Tensor coarse = random_tensor({1, 2, 2, 2}, rng);
  Tensor fine = random_tensor({1, 3, 3, 2}, rng);  // odd fine level exercises the crop
  Tensor lw0 = random_tensor({1, 2, 2, 3}, rng);
  Tensor lw1 = random_tensor({1, 3, 3, 3}, rng);
  auto loss = [&]() {
    auto fused = fpn.forward({coarse, fine}, false);
    double s = 0.0;
    for (std::size_t i = 0; i < fused[0].size(); ++i) s += lw0[i] * fused[0][i];
    for (std::size_t i = 0; i < fused[1].size(); ++i) s += lw1[i] * fused[1][i];
    return s;
  };
  loss();
  auto grads = fpn.backward({lw0, lw1});
  CHECK(testutil::max_grad_rel_err(loss, coarse, grads[0], 1e-6) < 1e-4);
  CHECK(testutil::max_grad_rel_err(loss, fine, grads[1], 1e-6) < 1e-4);
}

// ---------------------------------------------------------------------------
// Shape determinism across blocks

TEST_CASE("blocks: output shape is a function of input shape and spec") {
  std::mt19937 rng(19);
  DenseBlock block({.input_channels = 3, .growth_rate = 2, .num_layers = 2}, rng);
  SeBlock se(7, 7, rng);
  Tensor x1 = random_tensor({6, 6, 3}, rng);
  Tensor x2 = random_tensor({6, 6, 3}, rng);
  CHECK(lungct::dense_block_forward(block, x1).same_shape(lungct::dense_block_forward(block, x2)));
  Tensor s1 = random_tensor({4, 4, 7}, rng);
  Tensor s2 = random_tensor({4, 4, 7}, rng);
  CHECK(lungct::se_block(se, s1).same_shape(lungct::se_block(se, s2)));
}
