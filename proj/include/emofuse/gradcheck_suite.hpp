// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification suite over every differentiable operation,
// run at several seeds. Shared by the `gradcheck` subcommand and the
// acceptance tests. Double precision is required for the stated tolerance.

#pragma once

#include <string>
#include <vector>

#include "emofuse/grad_check.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

struct GradCheckCase {
  std::string op;
  uint64_t seed;
  double max_rel_err;
  size_t coords;
};

namespace gradcheck_detail {

// Random tensor whose 2x2 pooling windows contain no near-ties, so the
// perturbation cannot cross an argmax boundary.
inline TensorPtr<double> pool_safe_input(std::vector<size_t> shape, RngStream& rng) {
  const size_t h = shape[0], w = shape[1], c = shape[2];
  for (int attempt = 0; attempt < 32; ++attempt) {
    auto t = Tensor<double>::randn(shape, rng, 1.0, true);
    auto v = t->values();
    bool ok = true;
    for (size_t r = 0; r < (h + 1) / 2 && ok; ++r) {
      for (size_t cc = 0; cc < (w + 1) / 2 && ok; ++cc) {
        for (size_t ch = 0; ch < c && ok; ++ch) {
          std::vector<double> window;
          for (size_t dr = 0; dr < 2; ++dr)
            for (size_t dc = 0; dc < 2; ++dc) {
              const size_t hr = 2 * r + dr, wc = 2 * cc + dc;
              if (hr < h && wc < w) window.push_back(v[(hr * w + wc) * c + ch]);
            }
          for (size_t i = 0; i < window.size(); ++i)
            for (size_t j = i + 1; j < window.size(); ++j)
              if (std::abs(window[i] - window[j]) < 1e-3) ok = false;
        }
      }
    }
    if (ok) return t;
  }
  throw ValueError("could not draw a tie-free pooling input");
}

// ReLU inputs kept away from the kink.
inline TensorPtr<double> off_kink_input(std::vector<size_t> shape, RngStream& rng) {
  auto t = Tensor<double>::make(shape, true);
  for (auto& v : t->values()) {
    const double mag = rng.uniform(0.2, 2.0);
    v = rng.uniform01() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace gradcheck_detail

// Runs every op case at `n_seeds` seeds derived from `base_seed`; appends
// one entry per (op, seed).
inline std::vector<GradCheckCase> run_gradcheck_suite(uint64_t base_seed = 1, size_t n_seeds = 5,
                                                      double h = 1e-5) {
  using D = double;
  using TP = TensorPtr<D>;
  std::vector<GradCheckCase> results;

  for (size_t si = 0; si < n_seeds; ++si) {
    const uint64_t seed = base_seed + si;
    RngStream rng(seed, "gradcheck");
    auto randn = [&rng](std::vector<size_t> shape, double scale = 1.0, bool rg = true) {
      return Tensor<D>::randn(std::move(shape), rng, scale, rg);
    };
    auto run = [&](const char* name,
                   const std::function<TP(Tape<D>&, const std::vector<TP>&)>& f,
                   const std::vector<TP>& inputs) {
      const auto report = grad_check<D>(f, inputs, h);
      results.push_back({name, seed, static_cast<double>(report.max_rel_err),
                         report.coords_checked});
    };

    {
      auto x = randn({6, 5, 2});
      auto k = randn({3, 3, 2, 3}, 0.5);
      auto b = randn({3}, 0.5);
      auto proj = randn({4 * 3 * 3}, 1.0, false);
      run("conv2d/valid",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            return project(t, conv2d(t, in[0], in[1], in[2], Padding::valid), proj);
          },
          {x, k, b});
      auto proj_same = randn({6 * 5 * 3}, 1.0, false);
      run("conv2d/same",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            return project(t, conv2d(t, in[0], in[1], in[2], Padding::same), proj_same);
          },
          {x, k, b});
    }
    {
      auto x = gradcheck_detail::pool_safe_input({6, 6, 2}, rng);
      auto proj = randn({3 * 3 * 2}, 1.0, false);
      run("maxpool2d",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            return project(t, maxpool2d(t, in[0]), proj);
          },
          {x});
    }
    {
      auto x = randn({5});
      auto w = randn({5, 4}, 0.7);
      auto b = randn({4}, 0.3);
      auto proj = randn({4}, 1.0, false);
      run("dense",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            return project(t, dense(t, in[0], in[1], in[2]), proj);
          },
          {x, w, b});
    }
    {
      auto x = gradcheck_detail::off_kink_input({8}, rng);
      auto proj = randn({8}, 1.0, false);
      run("relu",
          [&](Tape<D>& t, const std::vector<TP>& in) { return project(t, relu(t, in[0]), proj); },
          {x});
    }
    {
      const size_t bsz = 6, f = 4;
      auto x = randn({bsz, f});
      auto gamma = randn({f}, 0.4);
      for (auto& v : gamma->values()) v += 1.0;
      auto beta = randn({f}, 0.4);
      auto proj = randn({bsz * f}, 1.0, false);
      run("batchnorm/train",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            BatchNormLayer<D> layer{in[1], in[2], Tensor<D>::make({f}),
                                    Tensor<D>::filled({f}, 1.0)};
            return project(t, batchnorm(t, in[0], layer, Mode::train), proj);
          },
          {x, gamma, beta});
    }
    {
      const size_t input_dim = 3, units = 4;
      std::vector<TP> inputs;
      inputs.push_back(randn({input_dim}));             // x
      inputs.push_back(randn({units}, 0.5));            // h_prev
      inputs.push_back(randn({units}, 0.5));            // c_prev
      for (int g = 0; g < 4; ++g) {
        inputs.push_back(randn({input_dim, units}, 0.5));
        inputs.push_back(randn({units, units}, 0.5));
        inputs.push_back(randn({units}, 0.3));
      }
      auto proj_h = randn({units}, 1.0, false);
      auto proj_c = randn({units}, 1.0, false);
      run("lstm_step",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            LstmWeights<D> w{in[3],  in[4],  in[5],  in[6],  in[7],  in[8],
                             in[9],  in[10], in[11], in[12], in[13], in[14]};
            auto st = lstm_step(t, in[0], in[1], in[2], w);
            return add(t, project(t, st.h, proj_h), project(t, st.c, proj_c));
          },
          inputs);
    }
    {
      auto logits = randn({5}, 1.5);
      const size_t label = rng.index(5);
      run("softmax_cross_entropy",
          [&, label](Tape<D>& t, const std::vector<TP>& in) {
            return softmax_cross_entropy(t, in[0], label);
          },
          {logits});
    }
    {
      auto table = randn({6, 4});
      const size_t rows[3] = {rng.index(6), rng.index(6), rng.index(6)};
      auto proj = randn({3 * 4}, 1.0, false);
      run("embedding_lookup",
          [&](Tape<D>& t, const std::vector<TP>& in) {
            std::vector<TP> looked;
            for (size_t r : rows) looked.push_back(embedding_lookup(t, in[0], r));
            return project(t, stack_rows(t, looked), proj);
          },
          {table});
    }
  }
  return results;
}

}  // namespace emofuse
