#include "doctest.h"
#include "oracles.hpp"

#include <random>

#include "dmtrl/errors.hpp"
#include "dmtrl/network.hpp"
#include "dmtrl/training.hpp"

using namespace dmtrl;

namespace {

NetworkSpec small_conv_spec(SharingMode mode, std::size_t tasks) {
  NetworkSpec spec{{6, 6, 2},
                   {{Conv2d{3, 3, 2, 3}, mode},
                    {Activation::tanh},
                    {MaxPool2{}},
                    {FullyConnected{12, 5}, mode},
                    {Activation::tanh},
                    {FullyConnected{5, 2}}},
                   tasks,
                   {}};
  return spec;
}

// Plain independent network whose weights are the effective weights of `net`.
MultiTaskNetwork materialise(const MultiTaskNetwork& net) {
  MultiTaskNetwork plain(with_sharing(net.spec(), SharingMode::independent, false));
  for (std::size_t i : net.parametrised_layers())
    for (std::size_t t = 0; t < net.task_count(); ++t) {
      plain.set_weight(i, t, net.weight(i, t));
      plain.set_bias(i, t, net.bias(i, t));
    }
  return plain;
}

double probe_loss(MultiTaskNetwork& net, const Tensor& x, const std::vector<Tensor>& probes) {
  double total = 0.0;
  for (std::size_t t = 0; t < net.task_count(); ++t) total += oracle::weighted_sum(net.forward(t, x, false), probes[t]);
  return total;
}

void randomise_biases(MultiTaskNetwork& net, std::mt19937_64& rng) {
  for (auto& p : net.parameters())
    if (p.name.find(".b") != std::string::npos) *p.value = oracle::random_tensor(p.value->shape(), rng, 0.3);
  net.invalidate();
}

}  // namespace

TEST_CASE("single task with independent layers is an ordinary network") {
  NetworkSpec spec{{4}, {{FullyConnected{4, 3}}, {Activation::relu}, {FullyConnected{3, 2}}}, 1, {}};
  MultiTaskNetwork net = build_network(spec, PlainRandom{}, 3);
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({5, 4}, rng);
  Tensor expect = fc_forward(relu_forward(fc_forward(x, net.weight(0, 0), net.bias(0, 0))), net.weight(2, 0), net.bias(2, 0));
  CHECK(net.forward(0, x) == expect);
}

TEST_CASE("tied layers give identical task outputs when the heads agree") {
  NetworkSpec spec = with_sharing(small_conv_spec(SharingMode::tied, 3), SharingMode::tied, true);
  MultiTaskNetwork net = build_network(spec, PlainRandom{}, 4);
  const std::size_t head = 5;
  for (std::size_t t = 1; t < 3; ++t) net.set_weight(head, t, net.weight(head, 0));
  std::mt19937_64 rng(2);
  Tensor x = oracle::random_tensor({4, 6, 6, 2}, rng);
  Tensor y0 = net.forward(0, x);
  CHECK(net.forward(1, x) == y0);
  CHECK(net.forward(2, x) == y0);
  net.set_weight(head, 2, oracle::random_tensor({5, 2}, rng));
  CHECK_FALSE(net.forward(2, x) == y0);
}

TEST_CASE("soft TT layer composes to D1 x D2 x T") {
  NetworkSpec spec{{6}, {{FullyConnected{6, 4}, SharingMode::soft_tt}}, 3, {}};
  MultiTaskNetwork net(spec);
  std::mt19937_64 rng(3);
  TtFactors f{oracle::random_tensor({6, 2}, rng), {oracle::random_tensor({2, 4, 2}, rng)}, oracle::random_tensor({2, 3}, rng)};
  net.set_factors(0, f);
  CHECK(composed_shape(net.factors(0)) == Shape{6, 4, 3});
  CHECK(net.weight(0, 2).shape() == Shape{6, 4});
  CHECK(oracle::max_abs_diff(net.weight(0, 1), last_axis_slice(oracle::compose_tt(f), 1)) <= 1e-12);
  CHECK_THROWS_AS(net.set_factors(0, TtFactors{oracle::random_tensor({6, 2}, rng), {oracle::random_tensor({2, 5, 2}, rng)},
                                               oracle::random_tensor({2, 3}, rng)}),
                  ShapeError);
}

TEST_CASE("LAF with identity mixing runs each task on its latent slice") {
  NetworkSpec spec{{5}, {{FullyConnected{5, 3}, SharingMode::soft_laf}, {Activation::relu}, {FullyConnected{3, 1}}}, 3, {}};
  MultiTaskNetwork net = build_network(spec, RandomDecompose{0.0}, 5);
  std::mt19937_64 rng(4);
  Tensor l = oracle::random_tensor({5, 3, 3}, rng);
  net.set_factors(0, LafFactors{l, Tensor::identity(3)});
  Tensor x = oracle::random_tensor({7, 5}, rng);
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor h = relu_forward(fc_forward(x, last_axis_slice(l, t), net.bias(0, t)));
    CHECK(net.forward(t, x) == fc_forward(h, net.weight(2, t), net.bias(2, t)));
  }
}

TEST_CASE("soft forward equals a plain network on the composed weights") {
  std::mt19937_64 rng(5);
  for (auto mode : {SharingMode::soft_laf, SharingMode::soft_tucker, SharingMode::soft_tt}) {
    MultiTaskNetwork net = build_network(small_conv_spec(mode, 3), RandomDecompose{0.3}, 6);
    randomise_biases(net, rng);
    MultiTaskNetwork plain = materialise(net);
    Tensor x = oracle::random_tensor({3, 6, 6, 2}, rng);
    for (std::size_t t = 0; t < 3; ++t) CHECK(oracle::max_abs_diff(net.forward(t, x), plain.forward(t, x)) <= 1e-12);
  }
}

TEST_CASE("zero output gradient gives zero parameter gradients") {
  MultiTaskNetwork net = build_network(small_conv_spec(SharingMode::soft_tucker, 2), RandomDecompose{0.1}, 7);
  std::mt19937_64 rng(6);
  Tensor x = oracle::random_tensor({2, 6, 6, 2}, rng);
  net.zero_grad();
  for (std::size_t t = 0; t < 2; ++t) {
    net.forward(t, x);
    net.backward(t, Tensor({2, 2}));
  }
  for (const auto& p : net.parameters()) CHECK(frobenius_norm(*p.grad) == 0.0);
}

TEST_CASE("gradients from two tasks add on shared factors") {
  std::mt19937_64 rng(7);
  MultiTaskNetwork net = build_network(small_conv_spec(SharingMode::soft_laf, 2), RandomDecompose{0.2}, 8);
  Tensor x = oracle::random_tensor({3, 6, 6, 2}, rng);
  std::vector<Tensor> probes{oracle::random_tensor({3, 2}, rng), oracle::random_tensor({3, 2}, rng)};

  auto grads_for = [&](std::vector<std::size_t> tasks) {
    net.zero_grad();
    for (auto t : tasks) {
      net.forward(t, x);
      net.backward(t, probes[t]);
    }
    std::vector<Tensor> out;
    for (const auto& p : net.parameters()) out.push_back(*p.grad);
    return out;
  };
  auto g0 = grads_for({0});
  auto g1 = grads_for({1});
  auto both = grads_for({0, 1});
  for (std::size_t k = 0; k < both.size(); ++k) CHECK(oracle::max_abs_diff(both[k], g0[k] + g1[k]) <= 1e-12);
}

TEST_CASE("end-to-end gradient of a two-layer soft Tucker network") {
  std::mt19937_64 rng(8);
  NetworkSpec spec{{4},
                   {{FullyConnected{4, 5}, SharingMode::soft_tucker}, {Activation::tanh}, {FullyConnected{5, 2}, SharingMode::soft_tucker}},
                   3,
                   {}};
  MultiTaskNetwork net = build_network(spec, RandomDecompose{0.0}, 9);
  randomise_biases(net, rng);
  Tensor x = oracle::random_tensor({6, 4}, rng);
  std::vector<Tensor> probes;
  for (int t = 0; t < 3; ++t) probes.push_back(oracle::random_tensor({6, 2}, rng));

  net.zero_grad();
  for (std::size_t t = 0; t < 3; ++t) {
    net.forward(t, x);
    net.backward(t, probes[t]);
  }
  auto params = net.parameters();
  for (auto& p : params) {
    Tensor analytic = *p.grad;
    Tensor original = *p.value;
    auto loss = [&](const Tensor& v) {
      *p.value = v;
      net.invalidate();
      const double l = probe_loss(net, x, probes);
      *p.value = original;
      net.invalidate();
      return l;
    };
    CAPTURE(p.name);
    CHECK(oracle::max_relative_error(analytic, oracle::numeric_gradient(loss, original)) <= 1e-5);
  }
}

TEST_CASE("parameter counts") {
  NetworkSpec spec{{3}, {{FullyConnected{3, 2}}}, 4, {}};
  CHECK(count_parameters(MultiTaskNetwork(spec)).total == 32);
  CHECK(count_parameters(MultiTaskNetwork(with_sharing(spec, SharingMode::tied, false))).total == 8);

  MultiTaskNetwork laf(with_sharing(spec, SharingMode::soft_laf, false));
  std::mt19937_64 rng(9);
  laf.set_factors(0, LafFactors{oracle::random_tensor({3, 2, 2}, rng), oracle::random_tensor({2, 4}, rng)});
  ParameterCount c = count_parameters(laf);
  CHECK(c.total == 28);
  CHECK(c.independent_total == 32);
  CHECK(c.ratio == doctest::Approx(28.0 / 32.0));
}

TEST_CASE("tied <= soft <= independent on task-correlated weights") {
  // Single-task networks that share most of their weights, as after pretraining
  // from a common initialisation; random stacks can need near-full TT ranks.
  NetworkSpec base = small_conv_spec(SharingMode::independent, 4);
  NetworkSpec single = base;
  single.task_count = 1;
  MultiTaskNetwork common = build_network(single, PlainRandom{}, 1);
  std::mt19937_64 rng(12);
  std::vector<MultiTaskNetwork> stl;
  for (int t = 0; t < 4; ++t) {
    MultiTaskNetwork n = MultiTaskNetwork::from_state(single, common.state());
    for (auto& p : n.parameters()) *p.value += oracle::random_tensor(p.value->shape(), rng, 0.02);
    n.invalidate();
    stl.push_back(std::move(n));
  }
  const std::size_t independent = count_parameters(init_from_stl(stl, base, 0.1)).total;
  const std::size_t tied = count_parameters(init_from_stl(stl, with_sharing(base, SharingMode::tied, true), 0.1)).total;
  for (auto mode : {SharingMode::soft_laf, SharingMode::soft_tucker, SharingMode::soft_tt}) {
    const std::size_t soft = count_parameters(init_from_stl(stl, with_sharing(base, mode, true), 0.1)).total;
    CAPTURE(to_string(mode));
    CHECK(tied < soft);
    CHECK(soft < independent);
  }
}

TEST_CASE("state round trip rebuilds an identical network") {
  std::mt19937_64 rng(10);
  for (auto mode : {SharingMode::independent, SharingMode::tied, SharingMode::soft_laf, SharingMode::soft_tucker,
                    SharingMode::soft_tt}) {
    NetworkSpec spec = with_sharing(small_conv_spec(SharingMode::independent, 3), mode, true);
    MultiTaskNetwork net = build_network(spec, RandomDecompose{0.2}, 11);
    MultiTaskNetwork copy = MultiTaskNetwork::from_state(spec, net.state());
    CHECK(copy.state() == net.state());
    Tensor x = oracle::random_tensor({2, 6, 6, 2}, rng);
    CHECK(copy.forward(1, x) == net.forward(1, x));
  }
}

TEST_CASE("heterogeneous heads") {
  NetworkSpec spec{{4}, {{FullyConnected{4, 6}, SharingMode::soft_tt}, {Activation::relu}, {FullyConnected{6, 1}}}, 2, {1, 8}};
  MultiTaskNetwork net = build_network(spec, RandomDecompose{0.1}, 12);
  std::mt19937_64 rng(11);
  Tensor x = oracle::random_tensor({3, 4}, rng);
  CHECK(net.forward(0, x).shape() == Shape{3, 1});
  CHECK(net.forward(1, x).shape() == Shape{3, 8});
  spec.layers[2].sharing = SharingMode::soft_laf;
  CHECK_THROWS(MultiTaskNetwork{spec});
}

TEST_CASE("misuse is rejected") {
  NetworkSpec bad{{4}, {{FullyConnected{5, 2}}}, 2, {}};
  CHECK_THROWS_AS(MultiTaskNetwork{bad}, ShapeError);
  NetworkSpec conv_too_big{{3, 3, 1}, {{Conv2d{4, 4, 1, 2}}, {FullyConnected{2, 1}}}, 1, {}};
  CHECK_THROWS_AS(MultiTaskNetwork{conv_too_big}, ShapeError);

  NetworkSpec spec{{4}, {{FullyConnected{4, 2}}}, 2, {}};
  MultiTaskNetwork net = build_network(spec, PlainRandom{}, 1);
  CHECK_THROWS(net.backward(0, Tensor({1, 2})));
  CHECK_THROWS(net.forward(2, Tensor({1, 4})));
  CHECK_THROWS_AS(net.forward(0, Tensor({1, 3})), ShapeError);
  CHECK_THROWS(build_network(with_sharing(spec, SharingMode::soft_laf, false), PlainRandom{}, 1));
}
