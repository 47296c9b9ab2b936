// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training regimes (joint and staged), 5-fold cross validation, evaluation
// metrics and the ablation grid over branch subsets.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "emofuse/adam.hpp"
#include "emofuse/common.hpp"
#include "emofuse/dataset.hpp"
#include "emofuse/model.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::vector<size_t>> folds;
  uint64_t seed = 0;

  size_t fold_count() const { return folds.size(); }

  std::vector<size_t> test_indices(size_t f) const { return folds.at(f); }

  std::vector<size_t> train_indices(size_t f) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < folds.size(); ++i)
      if (i != f) out.insert(out.end(), folds[i].begin(), folds[i].end());
    return out;
  }
};

// Seeded 5-fold split. With labels present the assignment is stratified:
// indices are grouped per class, shuffled within the class, and handed to a
// single global round-robin counter, which keeps overall fold sizes within
// one of each other while spreading every class across folds.
inline FoldSplit make_folds(size_t n, uint64_t seed, const std::vector<int>* labels = nullptr,
                            size_t k = 5) {
  if (n < k)
    throw ValueError("cannot make " + std::to_string(k) + " folds from " + std::to_string(n) +
                     " samples");
  FoldSplit split;
  split.seed = seed;
  split.folds.assign(k, {});

  std::vector<size_t> order;
  order.reserve(n);
  if (labels) {
    if (labels->size() != n) throw ShapeError("make_folds: labels length does not match n");
    int max_label = 0;
    for (int l : *labels) max_label = std::max(max_label, l);
    for (int cls = 0; cls <= max_label; ++cls) {
      std::vector<size_t> members;
      for (size_t i = 0; i < n; ++i)
        if ((*labels)[i] == cls) members.push_back(i);
      RngStream rng(seed, "folds/class" + std::to_string(cls));
      rng.shuffle(members);
      order.insert(order.end(), members.begin(), members.end());
    }
  } else {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(seed, "folds/shuffle");
    rng.shuffle(order);
  }
  for (size_t i = 0; i < order.size(); ++i) split.folds[i % k].push_back(order[i]);
  return split;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Confusion matrix with rows indexed by the true class.
struct MetricsReport {
  std::vector<std::vector<uint64_t>> confusion;

  explicit MetricsReport(size_t classes = 5)
      : confusion(classes, std::vector<uint64_t>(classes, 0)) {}

  size_t classes() const { return confusion.size(); }

  void record(size_t true_cls, size_t predicted) { confusion.at(true_cls).at(predicted) += 1; }

  uint64_t total() const {
    uint64_t n = 0;
    for (const auto& row : confusion)
      for (uint64_t v : row) n += v;
    return n;
  }

  uint64_t correct() const {
    uint64_t n = 0;
    for (size_t i = 0; i < confusion.size(); ++i) n += confusion[i][i];
    return n;
  }

  // Per-class recall: diagonal over row sum; 0 for absent classes.
  std::vector<double> per_class_accuracy() const {
    std::vector<double> out(confusion.size(), 0.0);
    for (size_t i = 0; i < confusion.size(); ++i) {
      uint64_t row = 0;
      for (uint64_t v : confusion[i]) row += v;
      if (row > 0) out[i] = static_cast<double>(confusion[i][i]) / static_cast<double>(row);
    }
    return out;
  }

  double weighted_accuracy() const {
    const uint64_t n = total();
    return n == 0 ? 0.0 : static_cast<double>(correct()) / static_cast<double>(n);
  }

  void merge(const MetricsReport& other) {
    for (size_t i = 0; i < confusion.size(); ++i)
      for (size_t j = 0; j < confusion.size(); ++j) confusion[i][j] += other.confusion[i][j];
  }
};

template <class T>
MetricsReport evaluate(Model<T>& m, const std::vector<SampleFeatures<T>>& test) {
  if (test.empty()) throw ValueError("evaluate: empty test split");
  MetricsReport report(m.cfg.classes);
  for (const auto& s : test) {
    const auto p = predict(m, s);
    report.record(static_cast<size_t>(s.label), p.label);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Regime { together, separate };

inline Regime parse_regime(const std::string& s) {
  if (s == "together") return Regime::together;
  if (s == "separate") return Regime::separate;
  throw ConfigError("unknown training regime '" + s + "' (expected together or separate)");
}

struct TrainingPlan {
  Regime regime = Regime::together;
  size_t epochs = 50;
  size_t batch_size = 32;
  double learning_rate = 0.01;
  uint64_t seed = 1;
  bool check_finite = false;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batchnorm)");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }
};

struct LossRecord {
  size_t epoch;
  std::string split;
  double loss;
};

struct TrainOutput {
  std::vector<LossRecord> loss_log;
  double initial_loss = 0.0;  // first batch loss before any update
  uint64_t branch_checksum_after_stage1 = 0;  // separate regime only
  uint64_t branch_checksum_after_stage2 = 0;
};

namespace train_detail {

template <class T>
std::vector<TensorPtr<T>> trainable_with_prefixes(const ParamSet<T>& params,
                                                  const std::vector<std::string>& prefixes) {
  std::vector<TensorPtr<T>> out;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    for (const auto& p : prefixes) {
      if (e.name.rfind(p, 0) == 0) {
        out.push_back(e.tensor);
        break;
      }
    }
  }
  return out;
}

template <class T>
uint64_t checksum_with_prefixes(const ParamSet<T>& params,
                                const std::vector<std::string>& prefixes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : params.entries()) {
    bool match = false;
    for (const auto& p : prefixes) match = match || e.name.rfind(p, 0) == 0;
    if (!match) continue;
    h = fnv1a(e.name, h);
    auto v = e.tensor->values();
    h = fnv1a(v.data(), v.size() * sizeof(T), h);
  }
  return h;
}

inline std::vector<std::string> branch_prefixes(const ModelConfig& cfg) {
  std::vector<std::string> out;
  if (cfg.has(BranchId::word)) {
    out.push_back("word_cnn.");
    out.push_back("word_table.");
  }
  if (cfg.has(BranchId::pos)) {
    out.push_back("pos_cnn.");
    out.push_back("pos_table.");
  }
  if (cfg.has(BranchId::mfsc)) out.push_back("mfsc.");
  if (cfg.has(BranchId::lld)) out.push_back("lld.");
  return out;
}

inline std::vector<std::string> prefixes_for_branch(BranchId b) {
  switch (b) {
    case BranchId::word: return {"word_cnn.", "word_table."};
    case BranchId::pos: return {"pos_cnn.", "pos_table."};
    case BranchId::mfsc: return {"mfsc."};
    case BranchId::lld: return {"lld."};
  }
  return {};
}

// One pass over the dataset in seeded shuffled batches, invoking
// step(batch_indices, batch_rng) and returning the sample-weighted mean of
// the returned batch losses.
template <class Step>
double run_epoch(size_t n, size_t batch_size, uint64_t seed, const std::string& stream,
                 size_t epoch, Step&& step) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RngStream shuffle_rng = RngStream(seed, stream).derived("epoch" + std::to_string(epoch));
  shuffle_rng.shuffle(order);
  double loss_sum = 0.0;
  size_t seen = 0, batch_no = 0;
  for (size_t begin = 0; begin < n; begin += batch_size, ++batch_no) {
    const size_t end = std::min(begin + batch_size, n);
    if (end - begin < 2 && seen > 0) break;  // skip a trailing 1-sample batch
    std::vector<size_t> batch(order.begin() + begin, order.begin() + end);
    RngStream batch_rng = RngStream(seed, stream + "/dropout")
                              .derived("epoch" + std::to_string(epoch))
                              .derived("batch" + std::to_string(batch_no));
    const double loss = step(batch, batch_rng, epoch, batch_no);
    loss_sum += loss * static_cast<double>(batch.size());
    seen += batch.size();
  }
  return loss_sum / static_cast<double>(seen);
}

template <class T>
double batch_loss_and_backward(Tape<T>& tape, const std::vector<TensorPtr<T>>& logits,
                               const std::vector<const SampleFeatures<T>*>& batch, size_t epoch,
                               size_t batch_no) {
  std::vector<TensorPtr<T>> losses;
  losses.reserve(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    losses.push_back(
        softmax_cross_entropy(tape, logits[i], static_cast<size_t>(batch[i]->label)));
  auto loss = mean_all(tape, concat(tape, losses));
  const double value = static_cast<double>(loss->values()[0]);
  if (!std::isfinite(value))
    throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                std::to_string(batch_no));
  tape.backward(loss);
  return value;
}

}  // namespace train_detail

// Joint regime: one optimizer over every trainable parameter, the final
// classification loss backpropagated through fusion and all extractors.
// `stop_after_epoch`, when set, is polled after each epoch and ends training
// early when it returns true.
template <class T>
TrainOutput train_together(Model<T>& m, const std::vector<SampleFeatures<T>>& train,
                           const TrainingPlan& plan,
                           const std::function<bool(size_t)>& stop_after_epoch = {}) {
  plan.validate();
  if (train.size() < 2) throw ValueError("train_together: need at least 2 samples");
  TrainOutput out;
  AdamOptimizer<T> opt(m.params.trainable(), static_cast<T>(plan.learning_rate));
  bool first_batch = true;
  for (size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    const double mean_loss = train_detail::run_epoch(
        train.size(), plan.batch_size, plan.seed, "train", epoch,
        [&](const std::vector<size_t>& batch_idx, RngStream& rng, size_t ep, size_t bn) {
          std::vector<const SampleFeatures<T>*> batch;
          batch.reserve(batch_idx.size());
          for (size_t i : batch_idx) batch.push_back(&train[i]);
          opt.zero_grad();
          Tape<T> tape;
          tape.set_check_finite(plan.check_finite);
          ForwardOptions<T> opts;
          auto logits = model_forward(tape, m, batch, opts, rng);
          const double loss = train_detail::batch_loss_and_backward(tape, logits, batch, ep, bn);
          opt.step();
          if (first_batch) {
            out.initial_loss = loss;
            first_batch = false;
          }
          return loss;
        });
    out.loss_log.push_back({epoch, "train", mean_loss});
    if (stop_after_epoch && stop_after_epoch(epoch)) break;
  }
  return out;
}

// Staged regime: each branch first trains against its own softmax head;
// branch parameters are then frozen (eval-mode forward, detached features)
// while the fusion network trains alone. Auxiliary heads are discarded.
template <class T>
TrainOutput train_separate(Model<T>& m, const std::vector<SampleFeatures<T>>& train,
                           const TrainingPlan& plan) {
  plan.validate();
  if (train.size() < 2) throw ValueError("train_separate: need at least 2 samples");
  TrainOutput out;
  bool first_batch = true;

  // Stage 1: per-branch feature training with auxiliary classifier heads.
  for (BranchId b : m.cfg.branches) {
    AuxHead<T> head = make_aux_head<T>(m.cfg, b, plan.seed);
    auto params = train_detail::trainable_with_prefixes(m.params,
                                                        train_detail::prefixes_for_branch(b));
    params.push_back(head.w);
    params.push_back(head.b);
    AdamOptimizer<T> opt(params, static_cast<T>(plan.learning_rate));
    const std::string stream = std::string("train/stage1/") + branch_name(b);
    for (size_t epoch = 0; epoch < plan.epochs; ++epoch) {
      const double mean_loss = train_detail::run_epoch(
          train.size(), plan.batch_size, plan.seed, stream, epoch,
          [&](const std::vector<size_t>& batch_idx, RngStream& rng, size_t ep, size_t bn) {
            std::vector<const SampleFeatures<T>*> batch;
            for (size_t i : batch_idx) batch.push_back(&train[i]);
            opt.zero_grad();
            Tape<T> tape;
            tape.set_check_finite(plan.check_finite);
            auto features = branch_forward(tape, m, b, batch, Mode::train, rng);
            std::vector<TensorPtr<T>> logits;
            logits.reserve(features.size());
            for (const auto& f : features) logits.push_back(dense(tape, f, head.w, head.b));
            const double loss = train_detail::batch_loss_and_backward(tape, logits, batch, ep, bn);
            opt.step();
            if (first_batch) {
              out.initial_loss = loss;
              first_batch = false;
            }
            return loss;
          });
      out.loss_log.push_back({epoch, std::string("stage1/") + branch_name(b), mean_loss});
    }
  }
  out.branch_checksum_after_stage1 =
      train_detail::checksum_with_prefixes(m.params, train_detail::branch_prefixes(m.cfg));

  // Stage 2: fusion only, on frozen eval-mode branch features.
  {
    AdamOptimizer<T> opt(train_detail::trainable_with_prefixes(m.params, {"fusion."}),
                         static_cast<T>(plan.learning_rate));
    for (size_t epoch = 0; epoch < plan.epochs; ++epoch) {
      const double mean_loss = train_detail::run_epoch(
          train.size(), plan.batch_size, plan.seed, "train/stage2", epoch,
          [&](const std::vector<size_t>& batch_idx, RngStream& rng, size_t ep, size_t bn) {
            std::vector<const SampleFeatures<T>*> batch;
            for (size_t i : batch_idx) batch.push_back(&train[i]);
            opt.zero_grad();
            Tape<T> tape;
            tape.set_check_finite(plan.check_finite);
            ForwardOptions<T> opts;
            opts.branch_mode = Mode::eval;
            opts.fusion_mode = Mode::train;
            opts.detach_features = true;
            auto logits = model_forward(tape, m, batch, opts, rng);
            const double loss = train_detail::batch_loss_and_backward(tape, logits, batch, ep, bn);
            opt.step();
            return loss;
          });
      out.loss_log.push_back({epoch, "stage2/fusion", mean_loss});
    }
  }
  out.branch_checksum_after_stage2 =
      train_detail::checksum_with_prefixes(m.params, train_detail::branch_prefixes(m.cfg));
  return out;
}

template <class T>
TrainOutput train_model(Model<T>& m, const std::vector<SampleFeatures<T>>& train,
                        const TrainingPlan& plan) {
  return plan.regime == Regime::together ? train_together(m, train, plan)
                                         : train_separate(m, train, plan);
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string subset;
  int fold;  // -1 marks the pooled row
  MetricsReport report;

  AblationRow(std::string s, int f, MetricsReport r)
      : subset(std::move(s)), fold(f), report(std::move(r)) {}
};

// Trains and evaluates one model per branch subset per fold, with shared
// fold assignments and per-(subset, fold) derived seeds. Emits per-fold rows
// plus one pooled row per subset. When checkpoint_dir is non-empty, every
// fold model is saved there as <subset>_fold<f>.ckpt.
template <class T>
std::vector<AblationRow> run_ablation_grid(const std::vector<std::vector<BranchId>>& subsets,
                                           const ModelConfig& base_cfg, const TrainingPlan& plan,
                                           const FeaturizedDataset<T>& ds,
                                           std::shared_ptr<EmbeddingTable<T>> word_table,
                                           const FoldSplit& folds,
                                           const std::string& checkpoint_dir = "") {
  if (subsets.empty()) throw ValueError("run_ablation_grid: no subsets");
  std::vector<AblationRow> rows;
  for (const auto& subset : subsets) {
    if (subset.empty()) throw ValueError("run_ablation_grid: empty subset");
    ModelConfig cfg = base_cfg;
    cfg.branches = subset;
    const std::string subset_name = branches_str(subset);
    MetricsReport pooled(cfg.classes);
    for (size_t f = 0; f < folds.fold_count(); ++f) {
      const auto train_idx = folds.train_indices(f);
      const auto test_idx = folds.test_indices(f);
      MinMaxStats stats;
      const MinMaxStats* stats_ptr = nullptr;
      if (cfg.has(BranchId::lld) && !ds.raw_lld.empty()) {
        std::vector<std::vector<double>> train_lld;
        train_lld.reserve(train_idx.size());
        for (size_t i : train_idx) train_lld.push_back(ds.raw_lld[i]);
        stats = fit_minmax(train_lld);
        stats_ptr = &stats;
      }
      auto train_samples = with_normalized_lld(ds, train_idx, stats_ptr);
      auto test_samples = with_normalized_lld(ds, test_idx, stats_ptr);

      TrainingPlan fold_plan = plan;
      fold_plan.seed = plan.seed ^ fnv1a(subset_name) ^ (0x9e3779b97f4a7c15ULL * (f + 1));
      auto model = build_model<T>(cfg, fold_plan.seed,
                                  cfg.has(BranchId::word) ? word_table : nullptr);
      train_model(model, train_samples, fold_plan);
      if (!checkpoint_dir.empty()) {
        std::string subset_file = subset_name;
        for (char& ch : subset_file)
          if (ch == '+') ch = '-';
        save_checkpoint((std::filesystem::path(checkpoint_dir) /
                         (subset_file + "_fold" + std::to_string(f) + ".ckpt"))
                            .string(),
                        model);
      }
      MetricsReport report = evaluate(model, test_samples);
      pooled.merge(report);
      rows.emplace_back(subset_name, static_cast<int>(f), std::move(report));
    }
    rows.emplace_back(subset_name, -1, std::move(pooled));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline void write_results_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "subset,fold,class,accuracy,weighted_accuracy\n";
  for (const auto& row : rows) {
    const auto per_class = row.report.per_class_accuracy();
    const std::string fold = row.fold < 0 ? "pooled" : std::to_string(row.fold);
    for (size_t c = 0; c < per_class.size(); ++c)
      os << row.subset << "," << fold << "," << emotion_names()[c] << "," << per_class[c] << ","
         << row.report.weighted_accuracy() << "\n";
  }
}

inline void write_results_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write results CSV '" + path + "'");
  write_results_csv(os, rows);
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss CSV '" + path + "'");
  os << "epoch,split,loss\n";
  os.precision(17);
  for (const auto& rec : log) os << rec.epoch << "," << rec.split << "," << rec.loss << "\n";
}

}  // namespace emofuse
