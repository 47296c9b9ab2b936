// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

// Reverse-mode tape. Operations append themselves in execution order, so the
// record is topological by construction; backward() replays it once in
// reverse, invoking each backward rule exactly once. A tape is confined to a
// single thread of execution.
template <class T>
class Tape {
 public:
  struct Op {
    const char* name;
    std::vector<uint64_t> input_ids;
    uint64_t output_id;
    std::function<void()> backward;
  };

  void record(const char* name, std::vector<uint64_t> input_ids, uint64_t output_id,
              std::function<void()> backward) {
    ops_.push_back(Op{name, std::move(input_ids), output_id, std::move(backward)});
  }

  // Finite-check hook applied to every op output when enabled.
  void note_output(const TensorPtr<T>& out, const char* opname) const {
    if (check_finite_ && !out->all_finite())
      throw ValueError(std::string("non-finite value in output of op '") + opname + "'");
  }

  // Seeds the scalar loss gradient with 1 and replays the tape in reverse.
  // Gradients accumulate into the .grad buffers of all requires_grad tensors
  // reachable from the loss.
  void backward(const TensorPtr<T>& loss) {
    if (loss->size() != 1)
      throw ShapeError("backward requires a scalar loss, got " + shape_str(loss->shape()));
    if (!loss->requires_grad())
      throw ValueError("backward on a tensor that does not require grad");
    loss->grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  const std::vector<Op>& ops() const { return ops_; }
  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

 private:
  std::vector<Op> ops_;
  bool check_finite_ = false;
};

}  // namespace emofuse
