// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Runs standalone and under ctest.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "emofuse/config.hpp"
#include "emofuse/dataset.hpp"
#include "emofuse/gradcheck_suite.hpp"
#include "emofuse/pipeline.hpp"
#include "emofuse/synth.hpp"
#include "emofuse/train.hpp"

using namespace emofuse;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

struct Criterion {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

const fs::path kWorkDir = "acceptance_tmp";

template <class T>
struct CorpusData {
  FeaturizedDataset<T> ds;
  std::shared_ptr<EmbeddingTable<T>> table;
  ModelConfig cfg;
};

template <class T>
CorpusData<T> featurized_corpus(const std::string& name, size_t size, uint64_t seed,
                                double correlation, double scale, double dropout) {
  const fs::path dir = kWorkDir / name;
  fs::remove_all(dir);
  SynthSpec spec;
  spec.size = size;
  spec.seed = seed;
  spec.correlation = correlation;
  const SynthResult r = generate_synthetic_corpus(dir.string(), spec);

  CorpusData<T> out;
  out.table = std::make_shared<EmbeddingTable<T>>(load_embeddings<T>(r.embeddings_path));
  out.cfg.scale = scale;
  out.cfg.dropout_conv = dropout;
  out.cfg.dropout_dense = dropout;
  out.cfg.word_dim = out.table->dim;

  const auto entries = load_manifest(r.manifest_path);
  DspConfig dsp;
  FeaturizeOptions opts;
  NaivePosTagger tagger;
  out.ds = featurize<T>(entries, dsp, out.cfg, out.table.get(), tagger, opts);
  out.cfg.lld_dim = out.ds.lld_dim;
  return out;
}

template <class T>
std::vector<SampleFeatures<T>> normalized_samples(const FeaturizedDataset<T>& ds) {
  std::vector<size_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  const MinMaxStats stats = fit_minmax(ds.raw_lld);
  return with_normalized_lld(ds, all, &stats);
}

template <class T>
double train_set_accuracy(Model<T>& m, const std::vector<SampleFeatures<T>>& samples) {
  return evaluate(m, samples).weighted_accuracy();
}

// --------------------------------------------------------------------------
// 1. Gradient suite
// --------------------------------------------------------------------------
Criterion criterion_gradients() {
  Criterion c;
  Timer t;
  const auto cases = run_gradcheck_suite(1, 5);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& cs : cases) {
    if (cs.max_rel_err > worst) {
      worst = cs.max_rel_err;
      worst_op = cs.op;
    }
  }
  c.require(worst <= 1e-4, "max relative error " + std::to_string(worst) + " at " + worst_op);
  c.require(t.seconds() < 120.0, "runtime exceeded 2 minutes");
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu cases, worst %.2e (%s)", cases.size(), worst,
                worst_op.c_str());
  if (c.ok) c.detail = buf;
  return c;
}

// --------------------------------------------------------------------------
// 2. DSP oracles
// --------------------------------------------------------------------------
Criterion criterion_dsp() {
  Criterion c;
  Timer t;
  DspConfig cfg;

  // (a) 440 Hz sine: per-frame argmax band vs an independent direct-DFT +
  // triangle-filterbank oracle.
  {
    AudioClip clip;
    clip.sample_rate = 16000;
    clip.samples.resize(16000);
    for (size_t i = 0; i < clip.samples.size(); ++i)
      clip.samples[i] = 0.5 * std::sin(2.0 * kPi * 440.0 * i / 16000.0);
    const FrameMatrix logmel = stft_log_mel(clip, cfg);

    auto mel_of = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto hz_of = [](double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); };
    const size_t flen = cfg.frame_len(), hop = cfg.hop_len(), bins = cfg.n_fft / 2 + 1;
    std::vector<double> edges(cfg.n_mels + 2);
    for (size_t m = 0; m < edges.size(); ++m)
      edges[m] = hz_of(mel_of(8000.0) * static_cast<double>(m) / static_cast<double>(cfg.n_mels + 1));

    for (size_t frame = 0; frame < logmel.frames && c.ok; ++frame) {
      std::vector<double> power(bins, 0.0);
      for (size_t k = 0; k < bins; ++k) {
        std::complex<double> acc(0, 0);
        for (size_t i = 0; i < flen; ++i) {
          const double w = 0.54 - 0.46 * std::cos(2.0 * kPi * i / double(flen - 1));
          const double ang = -2.0 * kPi * double(k) * double(i) / double(cfg.n_fft);
          acc += clip.samples[frame * hop + i] * w * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        power[k] = std::norm(acc);
      }
      size_t oracle_best = 0;
      double oracle_e = -1.0;
      for (size_t m = 0; m < cfg.n_mels; ++m) {
        double e = 0.0;
        for (size_t k = 0; k < bins; ++k) {
          const double f = double(k) * 16000.0 / double(cfg.n_fft);
          double w = 0.0;
          if (f > edges[m] && f < edges[m + 1]) w = (f - edges[m]) / (edges[m + 1] - edges[m]);
          else if (f >= edges[m + 1] && f < edges[m + 2])
            w = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
          e += w * power[k];
        }
        if (e > oracle_e) {
          oracle_e = e;
          oracle_best = m;
        }
      }
      size_t got = 0;
      for (size_t b = 1; b < logmel.bands; ++b)
        if (logmel.at(frame, b) > logmel.at(frame, got)) got = b;
      c.require(got == oracle_best,
                "440 Hz argmax band mismatch at frame " + std::to_string(frame));
    }
  }

  // (b) delta of a constant is exactly zero; delta of a ramp equals the
  // slope on interior frames.
  {
    FrameMatrix constant(20, 8);
    for (double& v : constant.v) v = 4.2;
    const FrameMatrix dc = delta(constant, 2);
    for (double v : dc.v) c.require(v == 0.0, "delta(constant) != 0");

    const double slope = -0.375;
    FrameMatrix ramp(30, 4);
    for (size_t ti = 0; ti < 30; ++ti)
      for (size_t b = 0; b < 4; ++b) ramp.at(ti, b) = slope * double(ti);
    const FrameMatrix dr = delta(ramp, 2);
    for (size_t ti = 2; ti + 2 < 30; ++ti)
      for (size_t b = 0; b < 4; ++b)
        c.require(std::abs(dr.at(ti, b) - slope) <= 1e-9, "delta(ramp) != slope");
  }

  // (c) segment count closed form for T in 1..500.
  {
    for (size_t frames = 1; frames <= 500 && c.ok; ++frames) {
      FrameMatrix m(frames, 2);
      const MfscMap map = segment_mfsc(m, m, m, cfg);
      const size_t expect = frames >= 64 ? (frames - 64) / 15 + 1 : 1;
      c.require(map.segment_count() == expect,
                "segment count wrong at T=" + std::to_string(frames));
    }
  }
  c.require(t.seconds() < 30.0, "runtime exceeded 30 seconds");
  if (c.ok) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "done in %.1f s", t.seconds());
    c.detail = buf;
  }
  return c;
}

// --------------------------------------------------------------------------
// 3. Shape conformance over all 15 branch subsets at two scales
// --------------------------------------------------------------------------
template <class T>
void run_shape_sweep(double scale, Criterion& c) {
  RngStream rng(5, "shapes");
  auto table = std::make_shared<EmbeddingTable<T>>();
  table->dim = 300;
  table->weights = Tensor<T>::randn({8, 300}, rng, T(0.3));
  for (size_t i = 0; i < 8; ++i) table->index["tok" + std::to_string(i)] = i;

  for (uint32_t mask = 1; mask < 16; ++mask) {
    ModelConfig cfg;
    cfg.scale = scale;
    cfg.dropout_conv = 0.0;
    cfg.dropout_dense = 0.0;
    cfg.branches.clear();
    for (uint32_t b = 0; b < 4; ++b)
      if (mask & (1u << b)) cfg.branches.push_back(static_cast<BranchId>(b));
    const size_t width = cfg.branch_width();
    c.require(width == static_cast<size_t>(std::llround(1024.0 * scale)),
              "branch width is not 1024*s");
    c.require(cfg.fc_width() == static_cast<size_t>(std::llround(4096.0 * scale)),
              "conv-stack flatten width is not 4096*s");

    auto m = build_model<T>(cfg, 17, cfg.has(BranchId::word) ? table : nullptr);
    c.require(m.fusion.h1.w->dim(0) == cfg.branches.size() * width,
              "fusion input is not 1024*s*k");

    std::vector<SampleFeatures<T>> samples(2);
    for (size_t i = 0; i < 2; ++i) {
      auto& s = samples[i];
      for (size_t k = 0; k < 4 + i; ++k) s.word_ids.push_back(static_cast<long>(rng.index(8)));
      for (size_t k = 0; k < 4 + i; ++k) s.pos_ids.push_back(static_cast<long>(rng.index(12)));
      for (size_t k = 0; k < 1 + i; ++k)
        s.mfsc_segments.push_back(Tensor<T>::randn({64, 64, 3}, rng, T(0.4)));
      s.lld = Tensor<T>::rand_uniform({cfg.lld_dim}, rng, T(0), T(1));
      s.label = static_cast<int>(i);
    }
    std::vector<const SampleFeatures<T>*> ptrs = {&samples[0], &samples[1]};

    RngStream drop(1, "drop");
    for (BranchId b : cfg.branches) {
      Tape<T> tape;
      auto outs = branch_forward(tape, m, b, ptrs, Mode::eval, drop);
      for (const auto& o : outs)
        c.require(o->size() == width, std::string("branch output width wrong for ") +
                                          branch_name(b) + " in subset " +
                                          branches_str(cfg.branches));
    }
    Tape<T> tape;
    ForwardOptions<T> fw;
    fw.branch_mode = Mode::eval;
    fw.fusion_mode = Mode::eval;
    auto logits = model_forward(tape, m, ptrs, fw, drop);
    c.require(logits[0]->size() == cfg.classes, "logits width wrong");
    if (!c.ok) return;
  }
}

Criterion criterion_shapes() {
  Criterion c;
  Timer small_timer;
  run_shape_sweep<double>(0.125, c);
  const double small_elapsed = small_timer.seconds();
  c.require(small_elapsed < 60.0, "s=1/8 sweep exceeded 1 minute");
  run_shape_sweep<float>(1.0, c);
  if (c.ok) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "15 subsets at s=1/8 (%.1f s) and s=1", small_elapsed);
    c.detail = buf;
  }
  return c;
}

// --------------------------------------------------------------------------
// 4. Chance-level start on the balanced synthetic corpus
// --------------------------------------------------------------------------
Criterion criterion_chance_level() {
  Criterion c;
  auto corpus = featurized_corpus<float>("chance", 100, 7, 1.0, 0.125, 0.5);
  auto samples = normalized_samples(corpus.ds);
  auto model = build_model<float>(corpus.cfg, 7, corpus.table);

  const double acc = train_set_accuracy(model, samples);
  c.require(acc >= 0.15 && acc <= 0.25,
            "random-init accuracy " + std::to_string(acc) + " outside 20% +- 5%");

  TrainingPlan plan;
  plan.epochs = 1;
  plan.batch_size = 32;
  plan.seed = 7;
  const TrainOutput out = train_together(model, samples, plan);
  const double gap = std::abs(out.initial_loss - std::log(5.0));
  c.require(gap <= 0.15, "initial loss " + std::to_string(out.initial_loss) +
                             " not within 0.15 of ln 5");
  if (c.ok) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "init accuracy %.3f, initial loss %.4f (ln5=%.4f)", acc,
                  out.initial_loss, std::log(5.0));
    c.detail = buf;
  }
  return c;
}

// --------------------------------------------------------------------------
// 5. Overfit sanity: end-to-end backprop drives training accuracy to 100%
// --------------------------------------------------------------------------
Criterion criterion_overfit() {
  Criterion c;
  Timer t;
  auto corpus = featurized_corpus<float>("overfit", 40, 7, 1.0, 0.125, 0.0);
  auto samples = normalized_samples(corpus.ds);
  auto model = build_model<float>(corpus.cfg, 7, corpus.table);

  TrainingPlan plan;
  plan.regime = Regime::together;
  plan.epochs = 200;
  plan.batch_size = 8;
  plan.learning_rate = 0.01;
  plan.seed = 7;

  size_t reached_at = 0;
  bool reached = false;
  const TrainOutput out = train_together(model, samples, plan, [&](size_t epoch) {
    if ((epoch + 1) % 2 != 0) return false;
    const double acc = train_set_accuracy(model, samples);
    if (acc >= 1.0) {
      reached = true;
      reached_at = epoch + 1;
      return true;
    }
    return false;
  });
  if (!reached) reached = train_set_accuracy(model, samples) >= 1.0;

  c.require(reached, "training accuracy did not reach 100% within 200 epochs (final loss " +
                         std::to_string(out.loss_log.back().loss) + ")");
  c.require(t.seconds() < 600.0, "runtime exceeded 10 minutes");
  if (c.ok) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "100%% train accuracy by epoch %zu in %.1f s", reached_at,
                  t.seconds());
    c.detail = buf;
  }
  return c;
}

// --------------------------------------------------------------------------
// 6. Regime harness: together and separate on the same corpus and seed
// --------------------------------------------------------------------------
Criterion criterion_regimes() {
  Criterion c;
  auto corpus = featurized_corpus<float>("regimes", 20, 9, 1.0, 0.125, 0.0);
  auto samples = normalized_samples(corpus.ds);

  TrainingPlan plan;
  plan.epochs = 2;
  plan.batch_size = 5;
  plan.seed = 9;

  auto together_model = build_model<float>(corpus.cfg, 9, corpus.table);
  plan.regime = Regime::together;
  const TrainOutput together = train_together(together_model, samples, plan);
  const MetricsReport together_report = evaluate(together_model, samples);
  c.require(!together.loss_log.empty(), "together regime produced no loss log");

  auto separate_model = build_model<float>(corpus.cfg, 9, corpus.table);
  plan.regime = Regime::separate;
  const TrainOutput separate = train_separate(separate_model, samples, plan);
  const MetricsReport separate_report = evaluate(separate_model, samples);

  c.require(separate.branch_checksum_after_stage1 == separate.branch_checksum_after_stage2,
            "branch parameters changed during separate stage 2");
  c.require(train_detail::checksum_with_prefixes(separate_model.params,
                                                 train_detail::branch_prefixes(corpus.cfg)) ==
                separate.branch_checksum_after_stage2,
            "branch checksum drifted after training");
  c.require(together_report.classes() == separate_report.classes() &&
                together_report.total() == separate_report.total(),
            "regimes produced structurally different reports");
  if (c.ok) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "together wa %.2f, separate wa %.2f, frozen checksums equal",
                  together_report.weighted_accuracy(), separate_report.weighted_accuracy());
    c.detail = buf;
  }
  return c;
}

// --------------------------------------------------------------------------
// 7. Evaluation arithmetic on random confusion matrices
// --------------------------------------------------------------------------
Criterion criterion_metrics() {
  Criterion c;
  RngStream rng(21, "acceptance-metrics");
  for (int trial = 0; trial < 1000 && c.ok; ++trial) {
    const size_t k = 2 + rng.index(6);
    MetricsReport r(k);
    uint64_t correct = 0, total = 0;
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < k; ++j) {
        const uint64_t v = rng.index(25);
        r.confusion[i][j] = v;
        total += v;
        if (i == j) correct += v;
      }
    if (total == 0) continue;
    c.require(r.total() == total && r.correct() == correct, "confusion totals wrong");
    c.require(r.weighted_accuracy() == double(correct) / double(total),
              "weighted accuracy != correct/total");
    const auto per_class = r.per_class_accuracy();
    for (size_t i = 0; i < k; ++i) {
      uint64_t row = 0;
      for (uint64_t v : r.confusion[i]) row += v;
      if (row == 0) {
        c.require(per_class[i] == 0.0, "recall of empty class not 0");
      } else {
        c.require(per_class[i] == double(r.confusion[i][i]) / double(row),
                  "per-class recall mismatch");
      }
    }
  }
  if (c.ok) c.detail = "1000 random confusion matrices, exact";
  return c;
}

// --------------------------------------------------------------------------
// 8. Determinism: bit-identical training artifacts, reproducible folds
// --------------------------------------------------------------------------
Criterion criterion_determinism() {
  Criterion c;

  for (size_t n = 5; n <= 200 && c.ok; ++n) {
    std::vector<int> labels(n);
    for (size_t i = 0; i < n; ++i) labels[i] = int(i % 5);
    const auto a = make_folds(n, 13, &labels);
    const auto b = make_folds(n, 13, &labels);
    c.require(a.folds == b.folds, "fold split not seed-reproducible at N=" + std::to_string(n));
    std::set<size_t> seen;
    size_t total = 0;
    for (const auto& fold : a.folds) {
      total += fold.size();
      for (size_t idx : fold)
        c.require(idx < n && seen.insert(idx).second, "fold overlap at N=" + std::to_string(n));
    }
    c.require(total == n, "folds do not cover the dataset at N=" + std::to_string(n));
  }

  const fs::path dir = kWorkDir / "determinism";
  fs::remove_all(dir);
  SynthSpec spec;
  spec.size = 15;
  spec.seed = 11;
  const SynthResult corpus = generate_synthetic_corpus((dir / "corpus").string(), spec);

  RunConfig rc;
  rc.manifest = corpus.manifest_path;
  rc.embeddings = corpus.embeddings_path;
  rc.model.scale = 0.0625;
  rc.model.dropout_conv = 0.25;
  rc.model.dropout_dense = 0.25;
  rc.epochs = 2;
  rc.batch_size = 5;
  rc.seed = 11;

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), {});
  };
  rc.out_dir = (dir / "run_a").string();
  run_train<float>(rc);
  rc.out_dir = (dir / "run_b").string();
  run_train<float>(rc);
  c.require(slurp((dir / "run_a" / "loss.csv").string()) ==
                slurp((dir / "run_b" / "loss.csv").string()),
            "loss logs differ between identical runs");
  c.require(slurp((dir / "run_a" / "model.ckpt").string()) ==
                slurp((dir / "run_b" / "model.ckpt").string()),
            "checkpoints differ between identical runs");
  if (c.ok) c.detail = "folds 5..200 exact; loss log and checkpoint bit-identical";
  return c;
}

}  // namespace

int main() {
  fs::remove_all(kWorkDir);
  fs::create_directories(kWorkDir);

  struct Entry {
    const char* name;
    std::function<Criterion()> run;
  };
  const std::vector<Entry> criteria = {
      {"1 gradient suite <= 1e-4 in double precision", criterion_gradients},
      {"2 DSP oracles (440 Hz argmax, delta, segmentation)", criterion_dsp},
      {"3 shape conformance over 15 subsets at s in {1, 1/8}", criterion_shapes},
      {"4 chance-level start on the balanced corpus", criterion_chance_level},
      {"5 overfit sanity (100% train accuracy, together)", criterion_overfit},
      {"6 regime harness (together + separate, frozen branches)", criterion_regimes},
      {"7 evaluation arithmetic (exact counting)", criterion_metrics},
      {"8 determinism (folds, loss logs, checkpoints)", criterion_determinism},
  };

  int failures = 0;
  for (const auto& entry : criteria) {
    Criterion result;
    Timer t;
    try {
      result = entry.run();
    } catch (const std::exception& e) {
      result.ok = false;
      result.detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %s: %s (%.1f s)\n", result.ok ? "PASS" : "FAIL", entry.name,
                result.detail.c_str(), t.seconds());
    std::fflush(stdout);
    if (!result.ok) ++failures;
  }
  if (failures == 0) {
    std::printf("acceptance: all %zu criteria passed\n", criteria.size());
    return 0;
  }
  std::printf("acceptance: %d of %zu criteria FAILED\n", failures, criteria.size());
  return 1;
}
