// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

// Ordered, named registry of model tensors. Trainable entries are what the
// optimizer updates; non-trainable entries (running statistics, frozen
// embeddings) still travel with checkpoints. Insertion order is part of the
// contract: it fixes optimizer iteration order and checkpoint layout.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    TensorPtr<T> tensor;
    bool trainable;
  };

  void add(const std::string& name, TensorPtr<T> tensor, bool trainable) {
    if (index_.count(name)) throw ValueError("parameter '" + name + "' registered twice");
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(tensor), trainable});
  }

  const TensorPtr<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<TensorPtr<T>> trainable() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  size_t count_trainable_scalars() const {
    size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor->size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor->zero_grad();
  }

  // Order-sensitive digest over names, shapes and raw values.
  uint64_t checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_) {
      h = fnv1a(e.name, h);
      for (size_t d : e.tensor->shape()) h = fnv1a(&d, sizeof(d), h);
      auto v = e.tensor->values();
      h = fnv1a(v.data(), v.size() * sizeof(T), h);
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-parameter Adam moments plus the shared step counter.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  uint64_t t = 0;
  T alpha = T(0.01);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// One Adam update with bias correction over a fixed parameter list, reading
// gradients from each tensor's grad buffer. Requires exclusive access to the
// parameters.
template <class T>
void adam_step(AdamState<T>& state, const std::vector<TensorPtr<T>>& params) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->size(), T(0));
      state.v[i].assign(params[i]->size(), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw ValueError("adam_step: parameter list size changed between steps");
  state.t += 1;
  const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
  const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (p.size() != state.m[i].size())
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape changed");
    auto pv = p.values();
    auto gv = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < pv.size(); ++j) {
      const T g = gv[j];
      m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g * g;
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      pv[j] -= state.alpha * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Convenience wrapper owning both the state and the parameter list.
template <class T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<TensorPtr<T>> params, T alpha = T(0.01), T beta1 = T(0.9),
                         T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)) {
    state_.alpha = alpha;
    state_.beta1 = beta1;
    state_.beta2 = beta2;
    state_.eps = eps;
  }

  void step() { adam_step(state_, params_); }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  const AdamState<T>& state() const { return state_; }
  const std::vector<TensorPtr<T>>& params() const { return params_; }

 private:
  std::vector<TensorPtr<T>> params_;
  AdamState<T> state_;
};

}  // namespace emofuse
