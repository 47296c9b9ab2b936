// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "emofuse/adam.hpp"
#include "emofuse/grad_check.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/tape.hpp"
#include "emofuse/tensor.hpp"

using namespace emofuse;
using D = double;
using TP = TensorPtr<D>;

namespace {

TP leaf(std::vector<size_t> shape, std::vector<D> v, bool rg = false) {
  return Tensor<D>::make(std::move(shape), std::move(v), rg);
}

TP random_leaf(std::vector<size_t> shape, RngStream& rng, bool rg = false, D scale = 1.0) {
  return Tensor<D>::randn(std::move(shape), rng, scale, rg);
}

// Brute-force sliding-window cross-correlation, independent of the op.
std::vector<D> conv_oracle(const std::vector<D>& x, size_t h, size_t w, size_t cin,
                           const std::vector<D>& k, size_t kh, size_t kw, size_t cout) {
  const size_t oh = h - kh + 1, ow = w - kw + 1;
  std::vector<D> out(oh * ow * cout, 0.0);
  for (size_t r = 0; r < oh; ++r)
    for (size_t c = 0; c < ow; ++c)
      for (size_t co = 0; co < cout; ++co) {
        D s = 0;
        for (size_t i = 0; i < kh; ++i)
          for (size_t j = 0; j < kw; ++j)
            for (size_t ci = 0; ci < cin; ++ci)
              s += x[((r + i) * w + (c + j)) * cin + ci] * k[((i * kw + j) * cin + ci) * cout + co];
        out[(r * ow + c) * cout + co] = s;
      }
  return out;
}

D sum_of(std::span<const D> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input") {
  Tape<D> tape;
  auto x = leaf({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = leaf({1, 1, 1, 1}, {1});
  auto b = leaf({1}, {0});
  auto y = conv2d(tape, x, k, b, Padding::valid);
  REQUIRE(y->shape() == std::vector<size_t>({3, 3, 1}));
  for (size_t i = 0; i < 9; ++i) CHECK(y->values()[i] == doctest::Approx(x->values()[i]));
}

TEST_CASE("conv2d 2x2 ones kernel matches brute-force window sums") {
  std::vector<D> xv = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<D> kv(4, 1.0);
  auto expect = conv_oracle(xv, 3, 3, 1, kv, 2, 2, 1);
  REQUIRE(expect == std::vector<D>({12, 16, 24, 28}));

  Tape<D> tape;
  auto y = conv2d(tape, leaf({3, 3, 1}, xv), leaf({2, 2, 1, 1}, kv), leaf({1}, {0}), Padding::valid);
  REQUIRE(y->shape() == std::vector<size_t>({2, 2, 1}));
  for (size_t i = 0; i < 4; ++i) CHECK(y->values()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("conv2d of an all-zero input is all zero") {
  Tape<D> tape;
  RngStream rng(3, "conv-zero");
  auto x = Tensor<D>::make({5, 4, 2});
  auto k = random_leaf({3, 3, 2, 3}, rng);
  auto y = conv2d(tape, x, k, leaf({3}, {0, 0, 0}), Padding::same);
  for (D v : y->values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d is linear in its input for fixed kernels") {
  RngStream rng(11, "conv-linear");
  auto k = random_leaf({3, 3, 2, 4}, rng);
  auto x = random_leaf({6, 5, 2}, rng);
  auto y = random_leaf({6, 5, 2}, rng);
  const D a = 1.7, b = -0.4;
  auto combo = Tensor<D>::make({6, 5, 2});
  for (size_t i = 0; i < combo->size(); ++i)
    combo->values()[i] = a * x->values()[i] + b * y->values()[i];
  Tape<D> tape;
  auto cx = conv2d(tape, x, k, nullptr, Padding::same);
  auto cy = conv2d(tape, y, k, nullptr, Padding::same);
  auto cc = conv2d(tape, combo, k, nullptr, Padding::same);
  for (size_t i = 0; i < cc->size(); ++i)
    CHECK(std::abs(cc->values()[i] - (a * cx->values()[i] + b * cy->values()[i])) < 1e-10);
}

TEST_CASE("conv2d rejects mismatched channel counts") {
  Tape<D> tape;
  auto x = Tensor<D>::make({4, 4, 2});
  auto k = Tensor<D>::make({3, 3, 3, 1});
  CHECK_THROWS_AS(conv2d(tape, x, k, nullptr, Padding::valid), ShapeError);
  auto big = Tensor<D>::make({5, 5, 2, 1});
  CHECK_THROWS_AS(conv2d(tape, x, big, nullptr, Padding::valid), ShapeError);
}

TEST_CASE("maxpool2d basics") {
  Tape<D> tape;
  auto y = maxpool2d(tape, leaf({2, 2, 1}, {1, 2, 3, 4}));
  REQUIRE(y->shape() == std::vector<size_t>({1, 1, 1}));
  CHECK(y->values()[0] == 4.0);

  auto c = maxpool2d(tape, Tensor<D>::filled({6, 8, 3}, 2.5));
  REQUIRE(c->shape() == std::vector<size_t>({3, 4, 3}));
  for (D v : c->values()) CHECK(v == 2.5);

  auto big = maxpool2d(tape, Tensor<D>::make({64, 64, 3}));
  CHECK(big->shape() == std::vector<size_t>({32, 32, 3}));

  auto odd = maxpool2d(tape, leaf({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  CHECK(odd->shape() == std::vector<size_t>({2, 2, 1}));
  CHECK(odd->values()[3] == 9.0);
}

TEST_CASE("maxpool2d backward conserves gradient mass and routes to first max") {
  RngStream rng(5, "pool");
  auto x = random_leaf({5, 7, 2}, rng, true);
  Tape<D> tape;
  auto y = maxpool2d(tape, x);
  auto s = sum_all(tape, y);
  tape.backward(s);
  CHECK(std::abs(sum_of(x->grad()) - static_cast<D>(y->size())) < 1e-12);

  // Tie: all four window entries equal; gradient goes to the first in row-major order.
  auto t = leaf({2, 2, 1}, {7, 7, 7, 7}, true);
  Tape<D> tape2;
  auto p = maxpool2d(tape2, t);
  tape2.backward(sum_all(tape2, p));
  CHECK(t->grad()[0] == 1.0);
  CHECK(t->grad()[1] == 0.0);
  CHECK(t->grad()[2] == 0.0);
  CHECK(t->grad()[3] == 0.0);
}

TEST_CASE("dense affine map") {
  Tape<D> tape;
  auto eye = leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto x = leaf({3}, {4, -1, 2});
  auto y = dense(tape, x, eye, leaf({3}, {0, 0, 0}));
  for (size_t i = 0; i < 3; ++i) CHECK(y->values()[i] == x->values()[i]);

  // x=[1,2] against a 2x3 weight matrix: columns (1,0), (0,1), (1,1).
  auto w = leaf({2, 3}, {1, 0, 1, 0, 1, 1});
  auto y2 = dense(tape, leaf({2}, {1, 2}), w, leaf({3}, {0, 0, 0}));
  CHECK(y2->values()[0] == 1.0);
  CHECK(y2->values()[1] == 2.0);
  CHECK(y2->values()[2] == 3.0);

  auto b = leaf({3}, {0.5, -1, 2});
  auto y3 = dense(tape, leaf({2}, {0, 0}), w, b);
  for (size_t i = 0; i < 3; ++i) CHECK(y3->values()[i] == b->values()[i]);

  CHECK_THROWS_AS(dense(tape, leaf({3}, {1, 2, 3}), w, b), ShapeError);
}

TEST_CASE("relu forward and gradient") {
  Tape<D> tape;
  auto y = relu(tape, leaf({3}, {-1, 0, 2}));
  CHECK(y->values()[0] == 0.0);
  CHECK(y->values()[1] == 0.0);
  CHECK(y->values()[2] == 2.0);

  auto neg = relu(tape, leaf({4}, {-3, -0.5, -10, -1e-9}));
  for (D v : neg->values()) CHECK(v == 0.0);

  // Gradient at x=3 with upstream 1, against a central finite difference.
  auto x = leaf({1}, {3.0}, true);
  Tape<D> t2;
  auto out = relu(t2, x);
  t2.backward(out);
  const D h = 1e-6;
  const D fd = ((3.0 + h > 0 ? 3.0 + h : 0.0) - (3.0 - h > 0 ? 3.0 - h : 0.0)) / (2 * h);
  CHECK(x->grad()[0] == doctest::Approx(fd).epsilon(1e-9));
}

TEST_CASE("batchnorm train mode normalizes per feature") {
  RngStream rng(17, "bn");
  const size_t bsz = 32, f = 6;
  auto x = Tensor<D>::make({bsz, f});
  for (size_t r = 0; r < bsz; ++r)
    for (size_t j = 0; j < f; ++j)
      x->values()[r * f + j] = rng.normal(static_cast<double>(j), 1.0 + 0.3 * j);
  BatchNormLayer<D> layer{Tensor<D>::filled({f}, 1.0), Tensor<D>::make({f}),
                          Tensor<D>::make({f}), Tensor<D>::filled({f}, 1.0)};
  Tape<D> tape;
  auto y = batchnorm(tape, x, layer, Mode::train);
  for (size_t j = 0; j < f; ++j) {
    D mean = 0, var = 0;
    for (size_t r = 0; r < bsz; ++r) mean += y->values()[r * f + j];
    mean /= bsz;
    for (size_t r = 0; r < bsz; ++r) {
      const D d = y->values()[r * f + j] - mean;
      var += d * d;
    }
    var /= bsz;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm constant batch maps to beta") {
  BatchNormLayer<D> layer{Tensor<D>::filled({2}, 2.0), Tensor<D>::filled({2}, 3.0),
                          Tensor<D>::make({2}), Tensor<D>::filled({2}, 1.0)};
  Tape<D> tape;
  auto x = Tensor<D>::filled({4, 2}, 5.0);
  auto y = batchnorm(tape, x, layer, Mode::train);
  for (D v : y->values()) CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("batchnorm eval with running stats equal to batch stats matches train output") {
  RngStream rng(23, "bn-eval");
  const size_t bsz = 8, f = 3;
  auto x = random_leaf({bsz, f}, rng);
  std::vector<D> mean(f, 0), var(f, 0);
  for (size_t r = 0; r < bsz; ++r)
    for (size_t j = 0; j < f; ++j) mean[j] += x->values()[r * f + j];
  for (auto& m : mean) m /= bsz;
  for (size_t r = 0; r < bsz; ++r)
    for (size_t j = 0; j < f; ++j) {
      const D d = x->values()[r * f + j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= bsz;

  BatchNormLayer<D> train_layer{Tensor<D>::filled({f}, 1.3), Tensor<D>::filled({f}, -0.2),
                                Tensor<D>::make({f}), Tensor<D>::filled({f}, 1.0)};
  BatchNormLayer<D> eval_layer{train_layer.gamma, train_layer.beta,
                               Tensor<D>::make({f}, mean), Tensor<D>::make({f}, var)};
  Tape<D> tape;
  auto yt = batchnorm(tape, x, train_layer, Mode::train);
  auto ye = batchnorm(tape, x, eval_layer, Mode::eval);
  for (size_t i = 0; i < yt->size(); ++i)
    CHECK(yt->values()[i] == doctest::Approx(ye->values()[i]).epsilon(1e-12));
}

TEST_CASE("batchnorm rejects train mode on a single-row batch") {
  BatchNormLayer<D> layer{Tensor<D>::filled({2}, 1.0), Tensor<D>::make({2}),
                          Tensor<D>::make({2}), Tensor<D>::filled({2}, 1.0)};
  Tape<D> tape;
  auto x = Tensor<D>::filled({1, 2}, 1.0);
  CHECK_THROWS_AS(batchnorm(tape, x, layer, Mode::train), ValueError);
  CHECK_NOTHROW(batchnorm(tape, x, layer, Mode::eval));
}

TEST_CASE("dropout contracts") {
  RngStream rng(31, "dropout");
  auto x = Tensor<D>::filled({8}, 1.0);
  Tape<D> tape;
  CHECK(dropout(tape, x, 0.0, Mode::train, rng).get() == x.get());
  CHECK(dropout(tape, x, 0.7, Mode::eval, rng).get() == x.get());
  CHECK_THROWS_AS(dropout(tape, x, 1.0, Mode::train, rng), ValueError);

  // Inverted dropout is mean-preserving: averaged over many masks the output
  // approaches the input.
  const int draws = 10000;
  D acc = 0;
  for (int d = 0; d < draws; ++d) {
    auto y = dropout(tape, x, 0.5, Mode::train, rng);
    acc += sum_of(y->values()) / static_cast<D>(y->size());
  }
  CHECK(std::abs(acc / draws - 1.0) < 0.02);
}

TEST_CASE("lstm_step with all-zero weights yields zero state") {
  const size_t input_dim = 3, units = 4;
  LstmWeights<D> w;
  auto zero = [&](std::vector<size_t> s) { return Tensor<D>::make(std::move(s)); };
  w.w_xi = zero({input_dim, units});
  w.w_hi = zero({units, units});
  w.b_i = zero({units});
  w.w_xf = zero({input_dim, units});
  w.w_hf = zero({units, units});
  w.b_f = zero({units});
  w.w_xg = zero({input_dim, units});
  w.w_hg = zero({units, units});
  w.b_g = zero({units});
  w.w_xo = zero({input_dim, units});
  w.w_ho = zero({units, units});
  w.b_o = zero({units});
  Tape<D> tape;
  auto h = Tensor<D>::make({units});
  auto c = Tensor<D>::make({units});
  RngStream rng(2, "lstm-zero");
  for (int t = 0; t < 3; ++t) {
    auto x = random_leaf({input_dim}, rng);
    auto s = lstm_step(tape, x, h, c, w);
    h = s.h;
    c = s.c;
    for (D v : h->values()) CHECK(v == 0.0);
    for (D v : c->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("lstm_step scalar cell matches a hand-computed gate evaluation") {
  LstmWeights<D> w;
  w.w_xi = leaf({1, 1}, {0.5});
  w.w_hi = leaf({1, 1}, {0.25});
  w.b_i = leaf({1}, {0.1});
  w.w_xf = leaf({1, 1}, {-0.3});
  w.w_hf = leaf({1, 1}, {0.2});
  w.b_f = leaf({1}, {0.05});
  w.w_xg = leaf({1, 1}, {0.8});
  w.w_hg = leaf({1, 1}, {-0.5});
  w.b_g = leaf({1}, {0.0});
  w.w_xo = leaf({1, 1}, {0.4});
  w.w_ho = leaf({1, 1}, {0.3});
  w.b_o = leaf({1}, {-0.2});
  const D x = 1.0, hp = 0.5, cp = -0.3;

  // Independent oracle: the five cell equations evaluated directly.
  auto sig = [](D v) { return 1.0 / (1.0 + std::exp(-v)); };
  const D i = sig(0.5 * x + 0.25 * hp + 0.1);
  const D f = sig(-0.3 * x + 0.2 * hp + 0.05);
  const D g = std::tanh(0.8 * x - 0.5 * hp + 0.0);
  const D o = sig(0.4 * x + 0.3 * hp - 0.2);
  const D c_expect = f * cp + i * g;
  const D h_expect = o * std::tanh(c_expect);

  Tape<D> tape;
  auto s = lstm_step(tape, leaf({1}, {x}), leaf({1}, {hp}), leaf({1}, {cp}), w);
  CHECK(s.c->values()[0] == doctest::Approx(c_expect).epsilon(1e-12));
  CHECK(s.h->values()[0] == doctest::Approx(h_expect).epsilon(1e-12));
}

TEST_CASE("lstm state depends on sequence length") {
  RngStream rng(41, "lstm-seq");
  const size_t input_dim = 2, units = 3;
  LstmWeights<D> w;
  auto rnd = [&](std::vector<size_t> s) { return random_leaf(std::move(s), rng, false, 0.8); };
  w.w_xi = rnd({input_dim, units});
  w.w_hi = rnd({units, units});
  w.b_i = rnd({units});
  w.w_xf = rnd({input_dim, units});
  w.w_hf = rnd({units, units});
  w.b_f = rnd({units});
  w.w_xg = rnd({input_dim, units});
  w.w_hg = rnd({units, units});
  w.b_g = rnd({units});
  w.w_xo = rnd({input_dim, units});
  w.w_ho = rnd({units, units});
  w.b_o = rnd({units});
  auto x = leaf({input_dim}, {0.7, -0.4});

  auto run = [&](int steps) {
    Tape<D> tape;
    auto h = Tensor<D>::make({units});
    auto c = Tensor<D>::make({units});
    for (int t = 0; t < steps; ++t) {
      auto s = lstm_step(tape, x, h, c, w);
      h = s.h;
      c = s.c;
    }
    return std::vector<D>(h->values().begin(), h->values().end());
  };
  auto h1 = run(1), h3 = run(3);
  bool differs = false;
  for (size_t i = 0; i < h1.size(); ++i)
    if (std::abs(h1[i] - h3[i]) > 1e-9) differs = true;
  CHECK(differs);
}

TEST_CASE("softmax values and shift invariance") {
  Tape<D> tape;
  auto u = softmax(tape, Tensor<D>::filled({4}, 2.0));
  for (D v : u->values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  auto y = softmax(tape, leaf({3}, {1, 2, 3}));
  CHECK(y->values()[0] == doctest::Approx(0.09003057).epsilon(1e-6));
  CHECK(y->values()[1] == doctest::Approx(0.24472847).epsilon(1e-6));
  CHECK(y->values()[2] == doctest::Approx(0.66524096).epsilon(1e-6));
  CHECK(std::abs(sum_of(y->values()) - 1.0) < 1e-12);

  auto shifted = softmax(tape, leaf({3}, {1 + 123.5, 2 + 123.5, 3 + 123.5}));
  for (size_t i = 0; i < 3; ++i)
    CHECK(std::abs(shifted->values()[i] - y->values()[i]) <= 1e-12);
}

TEST_CASE("softmax output sums to one for random logits") {
  RngStream rng(53, "softmax-prop");
  Tape<D> tape;
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_leaf({1 + rng.index(16)}, rng, false, 5.0);
    auto y = softmax(tape, x);
    CHECK(std::abs(sum_of(y->values()) - 1.0) < 1e-12);
    for (D v : y->values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0 + 1e-15);
    }
  }
}

TEST_CASE("cross entropy values") {
  Tape<D> tape;
  auto onehot = cross_entropy(tape, leaf({3}, {0, 1, 0}), 1);
  CHECK(std::abs(onehot->values()[0]) < 1e-9);

  auto uniform = cross_entropy(tape, Tensor<D>::filled({5}, 0.2), 3);
  CHECK(uniform->values()[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(tape, Tensor<D>::filled({5}, 0.2), 5), ValueError);
  CHECK_THROWS_AS(cross_entropy(tape, Tensor<D>::filled({5}, 0.5), 0), ValueError);
}

TEST_CASE("softmax cross entropy gradient uses p minus y") {
  auto logits = leaf({2}, {0, 0}, true);
  Tape<D> tape;
  auto loss = softmax_cross_entropy(tape, logits, 0);
  tape.backward(loss);
  CHECK(logits->grad()[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(logits->grad()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("concat forward and backward") {
  Tape<D> tape;
  std::vector<TP> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(Tensor<D>::filled({1024}, static_cast<D>(i)));
  auto y = concat(tape, parts);
  CHECK(y->shape() == std::vector<size_t>({4096}));

  auto single = concat(tape, {leaf({3}, {1, 2, 3})});
  CHECK(single->values()[2] == 3.0);

  CHECK_THROWS_AS(concat(tape, std::vector<TP>{}), ValueError);

  std::vector<TP> gparts = {leaf({2}, {1, 2}, true), leaf({3}, {3, 4, 5}, true)};
  Tape<D> t2;
  auto z = concat(t2, gparts);
  t2.backward(sum_all(t2, z));
  for (const auto& p : gparts)
    for (D g : p->grad()) CHECK(g == 1.0);
}

TEST_CASE("adam first step and zero-gradient behavior") {
  auto p = leaf({1}, {1.0}, true);
  p->grad()[0] = 2.0;
  AdamState<D> st;
  adam_step(st, {p});
  CHECK(st.t == 1);
  CHECK(p->values()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));

  auto q = leaf({2}, {3.0, -4.0}, true);
  AdamState<D> st2;
  adam_step(st2, {q});
  CHECK(st2.t == 1);
  CHECK(q->values()[0] == 3.0);
  CHECK(q->values()[1] == -4.0);

  // Constant positive gradient moves the parameter monotonically down.
  auto r = leaf({1}, {0.5}, true);
  AdamState<D> st3;
  D prev = r->values()[0];
  for (int i = 0; i < 2; ++i) {
    r->zero_grad();
    r->grad()[0] = 1.5;
    adam_step(st3, {r});
    CHECK(r->values()[0] < prev);
    prev = r->values()[0];
  }
}

TEST_CASE("grad_check validates dense, relu and a linear map") {
  RngStream rng(67, "gc");
  auto x = random_leaf({5}, rng, true);
  auto w = random_leaf({5, 4}, rng, true);
  auto b = random_leaf({4}, rng, true);
  auto proj = random_leaf({4}, rng);
  GradCheckReport<D> rep = grad_check<D>(
      [&](Tape<D>& t, const std::vector<TP>& in) {
        return project(t, dense(t, in[0], in[1], in[2]), proj);
      },
      {x, w, b}, 1e-5);
  CHECK(rep.max_rel_err <= 1e-4);

  // relu away from the kink
  auto xr = Tensor<D>::make({6}, {1.2, -0.8, 0.5, -2.0, 3.0, -0.4}, true);
  auto pr = random_leaf({6}, rng);
  auto rep2 = grad_check<D>(
      [&](Tape<D>& t, const std::vector<TP>& in) { return project(t, relu(t, in[0]), pr); },
      {xr}, 1e-5);
  CHECK(rep2.max_rel_err <= 1e-4);

  // Linear function: central differences are exact up to rounding.
  auto xl = random_leaf({8}, rng, true);
  auto wl = random_leaf({8}, rng);
  auto rep3 = grad_check<D>(
      [&](Tape<D>& t, const std::vector<TP>& in) { return sum_all(t, mul(t, in[0], wl)); },
      {xl}, 1e-5);
  CHECK(rep3.max_rel_err <= 1e-10);
}

TEST_CASE("tape replay is deterministic and topologically ordered") {
  RngStream rng(71, "tape");
  auto x = random_leaf({4}, rng, true);
  auto w = random_leaf({4, 4}, rng, true);
  auto b = random_leaf({4}, rng, true);

  auto build = [&](Tape<D>& t) {
    auto h = relu(t, dense(t, x, w, b));
    auto y = softmax_cross_entropy(t, h, 2);
    return y;
  };

  Tape<D> tape;
  auto loss = build(tape);
  tape.backward(loss);
  std::vector<D> gx(x->grad().begin(), x->grad().end());
  std::vector<D> gw(w->grad().begin(), w->grad().end());

  x->zero_grad();
  w->zero_grad();
  b->zero_grad();
  loss->zero_grad();
  // Intermediate gradients live in tensors captured by the tape; rebuilding
  // on a fresh tape gives the bit-identical replay the engine guarantees.
  Tape<D> tape2;
  auto loss2 = build(tape2);
  tape2.backward(loss2);
  for (size_t i = 0; i < gx.size(); ++i) CHECK(x->grad()[i] == gx[i]);
  for (size_t i = 0; i < gw.size(); ++i) CHECK(w->grad()[i] == gw[i]);

  // Topological order: no op consumes a tensor produced by a later op.
  std::vector<uint64_t> later_outputs;
  for (auto it = tape.ops().rbegin(); it != tape.ops().rend(); ++it) {
    for (uint64_t in_id : it->input_ids)
      for (uint64_t out_id : later_outputs) CHECK(in_id != out_id);
    later_outputs.push_back(it->output_id);
  }
}

TEST_CASE("two backward passes over the same tape are bit-identical") {
  RngStream rng(73, "tape-replay");
  auto x = random_leaf({4}, rng, true);
  auto w = random_leaf({4, 4}, rng, true);
  auto b = random_leaf({4}, rng, true);
  Tape<D> tape;
  auto h = dense(tape, x, w, b);
  auto r = relu(tape, h);
  auto loss = softmax_cross_entropy(tape, r, 1);
  tape.backward(loss);
  std::vector<D> gx(x->grad().begin(), x->grad().end());
  std::vector<D> gw(w->grad().begin(), w->grad().end());
  std::vector<D> gb(b->grad().begin(), b->grad().end());

  // Zero every gradient buffer reachable from the graph, then replay.
  for (const auto& t : {x, w, b, h, r, loss}) t->zero_grad();
  tape.backward(loss);
  for (size_t i = 0; i < gx.size(); ++i) CHECK(x->grad()[i] == gx[i]);
  for (size_t i = 0; i < gw.size(); ++i) CHECK(w->grad()[i] == gw[i]);
  for (size_t i = 0; i < gb.size(); ++i) CHECK(b->grad()[i] == gb[i]);
}

TEST_CASE("finite trap flags non-finite op outputs when enabled") {
  Tape<D> tape;
  tape.set_check_finite(true);
  auto x = leaf({2}, {std::numeric_limits<D>::infinity(), 1.0});
  CHECK_THROWS_AS(relu(tape, x), ValueError);
  Tape<D> off;
  CHECK_NOTHROW(relu(off, x));
}

TEST_CASE("embedding lookup forwards rows and scatters gradients") {
  auto table = leaf({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tape<D> tape;
  auto row = embedding_lookup(tape, table, 1);
  CHECK(row->values()[0] == 3.0);
  CHECK(row->values()[1] == 4.0);
  tape.backward(sum_all(tape, row));
  CHECK(table->grad()[2] == 1.0);
  CHECK(table->grad()[3] == 1.0);
  CHECK(table->grad()[0] == 0.0);
  CHECK_THROWS_AS(embedding_lookup(tape, table, 3), ValueError);
}

TEST_CASE("reshape views share data and gradient") {
  auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto v = x->reshaped({6});
  CHECK(v->values()[4] == 5.0);
  Tape<D> tape;
  tape.backward(sum_all(tape, v));
  for (D g : x->grad()) CHECK(g == 1.0);
  CHECK_THROWS_AS(x->reshaped({4}), ShapeError);
}
