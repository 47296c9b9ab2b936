// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// The four feature-extraction branches and the fusion network, assembled
// from the autodiff primitives into one differentiable graph.
//
// Widths derive from a single scale knob via unit = max(1, round(256*scale)):
//   branch output    4*unit   (1024 at scale 1)
//   fusion hidden 1  8*unit   (2048)
//   fusion hidden 2  4*unit   (1024)
//   MFSC conv stack  scaled(32), scaled(64), scaled(128), unit channels,
//                    flattening to 4*4*unit = 16*unit (4096) after four 2x2
//                    pools of a 64x64 map with same-padded 3x3 convolutions.
//
// Convolutions and dense layers that feed a batchnorm carry no bias of
// their own; the batchnorm beta provides the shift (a bias there would
// receive an identically zero gradient through the batch-mean subtraction).
//
// Trainable parameter counts per branch (U = unit, E = embedding width,
// D = LLD input dim, K = classes, k = active branch count; each batchnorm
// contributes 2 widths for gamma and beta):
//   text/pos CNN : sum_w in {2..5} (w*E*U + 2U) = 14*E*U + 8U
//   MFSC stack   : sum_l (9*C_{l-1}*C_l + 2*C_l)  over C = (3->c1->c2->c3->U)
//                  + (16U*16U + 2*16U) + (16U*4U + 2*4U)
//                  + 4*(4U*4U + 4U*4U + 4U)      [LSTM]
//   LLD DNN      : D*8U + 2*8U + 8U*4U + 2*4U
//   fusion       : (k*4U)*8U + 2*8U + 8U*4U + 2*4U + 4U*K + K
//   POS table    : 12 * pos_dim

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "emofuse/adam.hpp"
#include "emofuse/common.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/text.hpp"

namespace emofuse {

enum class BranchId : uint32_t { word = 0, pos = 1, mfsc = 2, lld = 3 };

inline const char* branch_name(BranchId b) {
  switch (b) {
    case BranchId::word: return "word";
    case BranchId::pos: return "pos";
    case BranchId::mfsc: return "mfsc";
    case BranchId::lld: return "lld";
  }
  return "?";
}

inline BranchId parse_branch(const std::string& name) {
  if (name == "word") return BranchId::word;
  if (name == "pos") return BranchId::pos;
  if (name == "mfsc") return BranchId::mfsc;
  if (name == "lld") return BranchId::lld;
  throw ConfigError("unknown branch '" + name + "' (expected word, pos, mfsc or lld)");
}

// "word+mfsc", "word,pos" or "all" -> canonical ordered branch list.
inline std::vector<BranchId> parse_branches(const std::string& names) {
  if (names == "all" || names.empty())
    return {BranchId::word, BranchId::pos, BranchId::mfsc, BranchId::lld};
  std::set<BranchId> seen;
  std::string token;
  for (char c : names + "+") {
    if (c == '+' || c == ',') {
      if (!token.empty()) seen.insert(parse_branch(token));
      token.clear();
    } else {
      token.push_back(c);
    }
  }
  std::vector<BranchId> out(seen.begin(), seen.end());
  return out;
}

inline std::string branches_str(const std::vector<BranchId>& bs) {
  std::string s;
  for (const auto& b : bs) {
    if (!s.empty()) s += "+";
    s += branch_name(b);
  }
  return s;
}

struct ModelConfig {
  std::vector<BranchId> branches = {BranchId::word, BranchId::pos, BranchId::mfsc, BranchId::lld};
  double scale = 1.0;
  size_t classes = 5;
  size_t lld_dim = 198;
  size_t word_dim = 300;
  size_t pos_dim = 10;
  size_t max_tokens = 40;
  size_t mel_bands = 64;
  size_t mfsc_frames = 64;
  double dropout_conv = 0.5;
  double dropout_dense = 0.5;
  bool finetune_embeddings = false;

  size_t scaled(size_t base) const {
    return std::max<size_t>(1, static_cast<size_t>(std::llround(static_cast<double>(base) * scale)));
  }
  size_t unit() const { return scaled(256); }
  size_t branch_width() const { return 4 * unit(); }    // 1024 * scale
  size_t fc_width() const { return 16 * unit(); }       // 4096 * scale
  size_t hidden1() const { return 8 * unit(); }         // 2048 * scale
  size_t hidden2() const { return 4 * unit(); }         // 1024 * scale
  size_t fusion_input() const { return branches.size() * branch_width(); }

  bool has(BranchId b) const {
    for (auto x : branches)
      if (x == b) return true;
    return false;
  }

  void validate() const {
    if (branches.empty()) throw ConfigError("model.branches: at least one branch is required");
    if (!(scale > 0.0 && scale <= 1.0))
      throw ConfigError("model.scale must lie in (0,1], got " + std::to_string(scale));
    if (classes < 2) throw ConfigError("model.classes must be at least 2");
    if (has(BranchId::lld) && lld_dim == 0) throw ConfigError("model.lld_dim must be positive");
    if (dropout_conv < 0.0 || dropout_conv >= 1.0)
      throw ConfigError("model.dropout_conv must lie in [0,1)");
    if (dropout_dense < 0.0 || dropout_dense >= 1.0)
      throw ConfigError("model.dropout_dense must lie in [0,1)");
    if (max_tokens < 5) throw ConfigError("model.max_tokens must be at least 5");
  }
};

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

template <class T>
struct ConvBlock {
  TensorPtr<T> kernel;  // [kh x kw x cin x cout]
  BatchNormLayer<T> bn;
};

template <class T>
struct DenseBlock {
  TensorPtr<T> w;  // [in x out]
  BatchNormLayer<T> bn;
};

template <class T>
struct TextCnnParams {
  std::vector<size_t> widths = {2, 3, 4, 5};
  std::vector<ConvBlock<T>> blocks;
};

template <class T>
struct MfscParams {
  std::array<ConvBlock<T>, 4> convs;
  DenseBlock<T> fc;   // 16U -> 16U
  DenseBlock<T> dn;   // 16U -> 4U
  LstmWeights<T> lstm;
};

template <class T>
struct LldParams {
  DenseBlock<T> h1;
  DenseBlock<T> h2;
};

template <class T>
struct FusionParams {
  DenseBlock<T> h1;
  DenseBlock<T> h2;
  TensorPtr<T> out_w;
  TensorPtr<T> out_b;
};

// Softmax classifier head used on top of a single branch during staged
// training.
template <class T>
struct AuxHead {
  TensorPtr<T> w;
  TensorPtr<T> b;
};

template <class T>
struct Model {
  ModelConfig cfg;
  uint64_t init_seed = 0;
  TextCnnParams<T> word_cnn;
  TextCnnParams<T> pos_cnn;
  MfscParams<T> mfsc;
  LldParams<T> lld;
  FusionParams<T> fusion;
  EmbeddingTable<T> pos_table;
  std::shared_ptr<EmbeddingTable<T>> word_table;
  // Per-coordinate max-min normalization ranges for the LLD input, fitted on
  // training data and carried with the checkpoint.
  TensorPtr<T> lld_norm_lo;
  TensorPtr<T> lld_norm_hi;
  ParamSet<T> params;

  bool has(BranchId b) const { return cfg.has(b); }
};

namespace model_detail {

template <class T>
TensorPtr<T> he_normal(std::vector<size_t> shape, size_t fan_in, uint64_t seed,
                       const std::string& name) {
  RngStream rng(seed, "init/" + name);
  const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  return Tensor<T>::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}

template <class T>
TensorPtr<T> xavier_uniform(std::vector<size_t> shape, size_t fan_in, size_t fan_out,
                            uint64_t seed, const std::string& name) {
  RngStream rng(seed, "init/" + name);
  const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  return Tensor<T>::rand_uniform(std::move(shape), rng, -limit, limit, /*requires_grad=*/true);
}

// Output (logits) layers start near zero so that a fresh model predicts the
// uniform distribution.
template <class T>
TensorPtr<T> logits_init(std::vector<size_t> shape, uint64_t seed, const std::string& name) {
  RngStream rng(seed, "init/" + name);
  return Tensor<T>::randn(std::move(shape), rng, T(0.01), /*requires_grad=*/true);
}

template <class T>
BatchNormLayer<T> make_bn(ParamSet<T>& ps, const std::string& name, size_t width) {
  BatchNormLayer<T> bn;
  bn.gamma = Tensor<T>::filled({width}, T(1), /*requires_grad=*/true);
  bn.beta = Tensor<T>::make({width}, /*requires_grad=*/true);
  bn.running_mean = Tensor<T>::make({width});
  bn.running_var = Tensor<T>::filled({width}, T(1));
  ps.add(name + ".bn.gamma", bn.gamma, true);
  ps.add(name + ".bn.beta", bn.beta, true);
  ps.add(name + ".bn.running_mean", bn.running_mean, false);
  ps.add(name + ".bn.running_var", bn.running_var, false);
  return bn;
}

template <class T>
ConvBlock<T> make_conv(ParamSet<T>& ps, const std::string& name, size_t kh, size_t kw, size_t cin,
                       size_t cout, uint64_t seed) {
  ConvBlock<T> blk;
  blk.kernel = he_normal<T>({kh, kw, cin, cout}, kh * kw * cin, seed, name + ".kernel");
  ps.add(name + ".kernel", blk.kernel, true);
  blk.bn = make_bn(ps, name, cout);
  return blk;
}

template <class T>
DenseBlock<T> make_dense(ParamSet<T>& ps, const std::string& name, size_t in, size_t out,
                         uint64_t seed) {
  DenseBlock<T> blk;
  blk.w = he_normal<T>({in, out}, in, seed, name + ".w");
  ps.add(name + ".w", blk.w, true);
  blk.bn = make_bn(ps, name, out);
  return blk;
}

template <class T>
TextCnnParams<T> make_text_cnn(ParamSet<T>& ps, const std::string& name, size_t embed_dim,
                               size_t filters, uint64_t seed) {
  TextCnnParams<T> p;
  for (size_t w : p.widths) {
    const std::string blk_name = name + ".w" + std::to_string(w);
    p.blocks.push_back(make_conv<T>(ps, blk_name, w, embed_dim, 1, filters, seed));
  }
  return p;
}

template <class T>
LstmWeights<T> make_lstm(ParamSet<T>& ps, const std::string& name, size_t input_dim, size_t units,
                         uint64_t seed) {
  LstmWeights<T> w;
  auto wx = [&](const char* g) {
    return xavier_uniform<T>({input_dim, units}, input_dim, units, seed,
                             name + ".w_x" + g);
  };
  auto wh = [&](const char* g) {
    return xavier_uniform<T>({units, units}, units, units, seed, name + ".w_h" + g);
  };
  w.w_xi = wx("i");
  w.w_hi = wh("i");
  w.b_i = Tensor<T>::make({units}, /*requires_grad=*/true);
  w.w_xf = wx("f");
  w.w_hf = wh("f");
  // Forget-gate bias starts at 1 so early training keeps cell memory.
  w.b_f = Tensor<T>::filled({units}, T(1), /*requires_grad=*/true);
  w.w_xg = wx("g");
  w.w_hg = wh("g");
  w.b_g = Tensor<T>::make({units}, /*requires_grad=*/true);
  w.w_xo = wx("o");
  w.w_ho = wh("o");
  w.b_o = Tensor<T>::make({units}, /*requires_grad=*/true);
  const char* gates[4] = {"i", "f", "g", "o"};
  const TensorPtr<T>* tensors[12] = {&w.w_xi, &w.w_hi, &w.b_i, &w.w_xf, &w.w_hf, &w.b_f,
                                     &w.w_xg, &w.w_hg, &w.b_g, &w.w_xo, &w.w_ho, &w.b_o};
  for (int g = 0; g < 4; ++g) {
    ps.add(name + ".w_x" + gates[g], *tensors[g * 3 + 0], true);
    ps.add(name + ".w_h" + gates[g], *tensors[g * 3 + 1], true);
    ps.add(name + ".b_" + gates[g], *tensors[g * 3 + 2], true);
  }
  return w;
}

}  // namespace model_detail

// Builds a freshly initialized model. All draws come from streams named
// after the parameter, so construction order does not affect values.
template <class T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed,
                     std::shared_ptr<EmbeddingTable<T>> word_table) {
  cfg.validate();
  using namespace model_detail;
  Model<T> m;
  m.cfg = cfg;
  m.init_seed = seed;
  const size_t unit = cfg.unit();
  const size_t width = cfg.branch_width();

  if (cfg.has(BranchId::word)) {
    if (!word_table) throw ConfigError("word branch is active but no embedding table was provided");
    if (word_table->dim != cfg.word_dim)
      throw ConfigError("embedding table dimension " + std::to_string(word_table->dim) +
                        " does not match configured word_dim " + std::to_string(cfg.word_dim));
    if (word_table->trainable != cfg.finetune_embeddings)
      throw ConfigError("embedding table trainability does not match finetune_embeddings");
    m.word_table = std::move(word_table);
    m.word_cnn = make_text_cnn<T>(m.params, "word_cnn", cfg.word_dim, unit, seed);
    if (m.word_table->trainable) m.params.add("word_table.weight", m.word_table->weights, true);
  }
  if (cfg.has(BranchId::pos)) {
    RngStream rng(seed, "init/pos_table.weight");
    m.pos_table = pos_embedding_table<T>(pos_tagset(), cfg.pos_dim, rng);
    m.params.add("pos_table.weight", m.pos_table.weights, true);
    m.pos_cnn = make_text_cnn<T>(m.params, "pos_cnn", cfg.pos_dim, unit, seed);
  }
  if (cfg.has(BranchId::mfsc)) {
    const size_t chans[5] = {3, cfg.scaled(32), cfg.scaled(64), cfg.scaled(128), unit};
    for (int l = 0; l < 4; ++l)
      m.mfsc.convs[l] = make_conv<T>(m.params, "mfsc.conv" + std::to_string(l + 1), 3, 3,
                                     chans[l], chans[l + 1], seed);
    m.mfsc.fc = make_dense<T>(m.params, "mfsc.fc", cfg.fc_width(), cfg.fc_width(), seed);
    m.mfsc.dn = make_dense<T>(m.params, "mfsc.dense", cfg.fc_width(), width, seed);
    m.mfsc.lstm = make_lstm<T>(m.params, "mfsc.lstm", width, width, seed);
  }
  if (cfg.has(BranchId::lld)) {
    m.lld.h1 = make_dense<T>(m.params, "lld.h1", cfg.lld_dim, cfg.hidden1(), seed);
    m.lld.h2 = make_dense<T>(m.params, "lld.h2", cfg.hidden1(), width, seed);
    m.lld_norm_lo = Tensor<T>::make({cfg.lld_dim});
    m.lld_norm_hi = Tensor<T>::filled({cfg.lld_dim}, T(1));
    m.params.add("lld_norm.lo", m.lld_norm_lo, false);
    m.params.add("lld_norm.hi", m.lld_norm_hi, false);
  }

  m.fusion.h1 = make_dense<T>(m.params, "fusion.h1", cfg.fusion_input(), cfg.hidden1(), seed);
  m.fusion.h2 = make_dense<T>(m.params, "fusion.h2", cfg.hidden1(), cfg.hidden2(), seed);
  m.fusion.out_w = logits_init<T>({cfg.hidden2(), cfg.classes}, seed, "fusion.out.w");
  m.fusion.out_b = Tensor<T>::make({cfg.classes}, /*requires_grad=*/true);
  m.params.add("fusion.out.w", m.fusion.out_w, true);
  m.params.add("fusion.out.b", m.fusion.out_b, true);
  return m;
}

template <class T>
AuxHead<T> make_aux_head(const ModelConfig& cfg, BranchId branch, uint64_t seed) {
  AuxHead<T> head;
  head.w = model_detail::logits_init<T>({cfg.branch_width(), cfg.classes}, seed,
                                        std::string("aux.") + branch_name(branch) + ".w");
  head.b = Tensor<T>::make({cfg.classes}, /*requires_grad=*/true);
  return head;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

// Per-sample network inputs after featurization. Tensors are leaves.
template <class T>
struct SampleFeatures {
  std::vector<long> word_ids;                 // -1 = out of vocabulary
  std::vector<long> pos_ids;
  std::vector<TensorPtr<T>> mfsc_segments;    // each [frames x bands x 3]
  TensorPtr<T> lld;                           // [D], normalized
  int label = -1;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace model_detail {

// Applies batchnorm -> relu -> dropout across a batch of row blocks by
// concatenating them, then returns the per-block slices.
template <class T>
std::vector<TensorPtr<T>> bn_relu_dropout_rows(Tape<T>& tape, const std::vector<TensorPtr<T>>& xs,
                                               BatchNormLayer<T>& bn, Mode mode, double rate,
                                               RngStream& rng) {
  auto big = xs.size() == 1 ? xs[0] : concat_rows(tape, xs);
  big = batchnorm(tape, big, bn, mode);
  big = relu(tape, big);
  big = dropout(tape, big, rate, mode, rng);
  std::vector<TensorPtr<T>> out;
  out.reserve(xs.size());
  size_t row = 0;
  if (xs.size() == 1) return {big};
  for (const auto& x : xs) {
    out.push_back(slice_rows(tape, big, row, x->dim(0)));
    row += x->dim(0);
  }
  return out;
}

// dense -> batchnorm -> relu -> dropout over a [B x in] matrix.
template <class T>
TensorPtr<T> dense_block_forward(Tape<T>& tape, const TensorPtr<T>& x, DenseBlock<T>& blk,
                                 Mode mode, double rate, RngStream& rng) {
  auto y = dense(tape, x, blk.w, nullptr);
  y = batchnorm(tape, y, blk.bn, mode);
  y = relu(tape, y);
  return dropout(tape, y, rate, mode, rng);
}

// Shared text-CNN topology: per width, full-embedding-width valid
// convolution over time, batchnorm + relu + dropout, max over time;
// concatenation across widths.
template <class T>
std::vector<TensorPtr<T>> text_cnn_forward(Tape<T>& tape, TextCnnParams<T>& p,
                                           const std::vector<TensorPtr<T>>& matrices, Mode mode,
                                           double rate, RngStream& rng) {
  const size_t batch = matrices.size();
  std::vector<std::vector<TensorPtr<T>>> pooled(batch);
  for (size_t wi = 0; wi < p.widths.size(); ++wi) {
    auto& blk = p.blocks[wi];
    std::vector<TensorPtr<T>> conv_out;
    conv_out.reserve(batch);
    for (const auto& mat : matrices) {
      const size_t embed = mat->dim(1);
      auto c = conv2d(tape, mat->reshaped({mat->dim(0), embed, 1}), blk.kernel, nullptr,
                      Padding::valid);
      conv_out.push_back(c->reshaped({c->dim(0), c->dim(2)}));
    }
    auto activated = bn_relu_dropout_rows(tape, conv_out, blk.bn, mode, rate, rng);
    for (size_t s = 0; s < batch; ++s) pooled[s].push_back(max_over_time(tape, activated[s]));
  }
  std::vector<TensorPtr<T>> out;
  out.reserve(batch);
  for (size_t s = 0; s < batch; ++s) out.push_back(concat(tape, pooled[s]));
  return out;
}

template <class T>
std::vector<TensorPtr<T>> sentence_matrices(Tape<T>& tape, const ModelConfig& cfg,
                                            const std::vector<const SampleFeatures<T>*>& samples,
                                            const EmbeddingTable<T>& table, bool use_pos) {
  std::vector<TensorPtr<T>> mats;
  mats.reserve(samples.size());
  for (const auto* s : samples) {
    const auto& ids = use_pos ? s->pos_ids : s->word_ids;
    mats.push_back(embed_and_pad(tape, ids, table, cfg.max_tokens).rows);
  }
  return mats;
}

template <class T>
std::vector<TensorPtr<T>> mfsc_forward(Tape<T>& tape, const ModelConfig& cfg, MfscParams<T>& p,
                                       const std::vector<const SampleFeatures<T>*>& samples,
                                       Mode mode, double conv_rate, double dense_rate,
                                       RngStream& rng) {
  // Flatten every segment of every sample into one working set.
  std::vector<TensorPtr<T>> segs;
  std::vector<size_t> counts;
  counts.reserve(samples.size());
  for (const auto* s : samples) {
    if (s->mfsc_segments.empty())
      throw ValueError("sample has no MFSC segments but the mfsc branch is active");
    for (const auto& seg : s->mfsc_segments) {
      if (seg->rank() != 3 || seg->dim(0) != cfg.mfsc_frames || seg->dim(1) != cfg.mel_bands ||
          seg->dim(2) != 3)
        throw ShapeError("MFSC segment shape " + shape_str(seg->shape()) + ", expected " +
                         shape_str({cfg.mfsc_frames, cfg.mel_bands, 3}));
      segs.push_back(seg);
    }
    counts.push_back(s->mfsc_segments.size());
  }

  for (int layer = 0; layer < 4; ++layer) {
    auto& blk = p.convs[layer];
    std::vector<TensorPtr<T>> conv_flat;
    conv_flat.reserve(segs.size());
    std::vector<std::array<size_t, 3>> shapes;
    shapes.reserve(segs.size());
    for (const auto& seg : segs) {
      auto c = conv2d(tape, seg, blk.kernel, nullptr, Padding::same);
      shapes.push_back({c->dim(0), c->dim(1), c->dim(2)});
      conv_flat.push_back(c->reshaped({c->dim(0) * c->dim(1), c->dim(2)}));
    }
    auto activated = bn_relu_dropout_rows(tape, conv_flat, blk.bn, mode, conv_rate, rng);
    for (size_t i = 0; i < segs.size(); ++i) {
      auto back = activated[i]->reshaped({shapes[i][0], shapes[i][1], shapes[i][2]});
      segs[i] = maxpool2d(tape, back);
    }
  }

  std::vector<TensorPtr<T>> flat;
  flat.reserve(segs.size());
  for (const auto& seg : segs) flat.push_back(seg->reshaped({seg->size()}));
  auto x = stack_rows(tape, flat);
  if (x->dim(1) != cfg.fc_width())
    throw ShapeError("MFSC conv stack flattened to " + std::to_string(x->dim(1)) +
                     ", expected " + std::to_string(cfg.fc_width()));
  x = dense_block_forward(tape, x, p.fc, mode, dense_rate, rng);
  x = dense_block_forward(tape, x, p.dn, mode, dense_rate, rng);

  // Per-sample LSTM over its segment sequence; the final hidden state is the
  // branch output.
  std::vector<TensorPtr<T>> out;
  out.reserve(samples.size());
  const size_t width = cfg.branch_width();
  size_t row = 0;
  for (size_t s = 0; s < samples.size(); ++s) {
    auto h = Tensor<T>::make({width});
    auto c = Tensor<T>::make({width});
    for (size_t i = 0; i < counts[s]; ++i) {
      auto step_in = slice_rows(tape, x, row + i, 1)->reshaped({width});
      auto st = lstm_step(tape, step_in, h, c, p.lstm);
      h = st.h;
      c = st.c;
    }
    row += counts[s];
    out.push_back(h);
  }
  return out;
}

template <class T>
std::vector<TensorPtr<T>> lld_forward(Tape<T>& tape, const ModelConfig& cfg, LldParams<T>& p,
                                      const std::vector<const SampleFeatures<T>*>& samples,
                                      Mode mode, double rate, RngStream& rng) {
  std::vector<TensorPtr<T>> rows;
  rows.reserve(samples.size());
  for (const auto* s : samples) {
    if (!s->lld) throw ValueError("sample has no LLD vector but the lld branch is active");
    if (s->lld->size() != cfg.lld_dim)
      throw ShapeError("LLD vector of dimension " + std::to_string(s->lld->size()) +
                       " does not match configured lld_dim " + std::to_string(cfg.lld_dim));
    rows.push_back(s->lld);
  }
  auto x = stack_rows(tape, rows);
  x = dense_block_forward(tape, x, p.h1, mode, rate, rng);
  x = dense_block_forward(tape, x, p.h2, mode, rate, rng);
  std::vector<TensorPtr<T>> out;
  out.reserve(samples.size());
  for (size_t s = 0; s < samples.size(); ++s)
    out.push_back(slice_rows(tape, x, s, 1)->reshaped({cfg.branch_width()}));
  return out;
}

}  // namespace model_detail

// Forward of one branch for a batch; returns one branch_width() vector per
// sample.
template <class T>
std::vector<TensorPtr<T>> branch_forward(Tape<T>& tape, Model<T>& m, BranchId branch,
                                         const std::vector<const SampleFeatures<T>*>& samples,
                                         Mode mode, RngStream& rng) {
  using namespace model_detail;
  const auto& cfg = m.cfg;
  switch (branch) {
    case BranchId::word: {
      auto mats = sentence_matrices(tape, cfg, samples, *m.word_table, false);
      return text_cnn_forward(tape, m.word_cnn, mats, mode, cfg.dropout_conv, rng);
    }
    case BranchId::pos: {
      auto mats = sentence_matrices(tape, cfg, samples, m.pos_table, true);
      return text_cnn_forward(tape, m.pos_cnn, mats, mode, cfg.dropout_conv, rng);
    }
    case BranchId::mfsc:
      return mfsc_forward(tape, cfg, m.mfsc, samples, mode, cfg.dropout_conv, cfg.dropout_dense,
                          rng);
    case BranchId::lld:
      return lld_forward(tape, cfg, m.lld, samples, mode, cfg.dropout_dense, rng);
  }
  throw ValueError("unknown branch");
}

template <class T>
struct ForwardOptions {
  Mode branch_mode = Mode::train;
  Mode fusion_mode = Mode::train;
  bool detach_features = false;  // cut gradients at the branch outputs
};

// Concatenated branch features through the fusion stack; one logits vector
// per sample.
template <class T>
std::vector<TensorPtr<T>> fusion_forward(Tape<T>& tape, Model<T>& m,
                                         const std::vector<std::vector<TensorPtr<T>>>& branch_outs,
                                         Mode mode, RngStream& rng) {
  const auto& cfg = m.cfg;
  if (branch_outs.size() != cfg.branches.size())
    throw ValueError("fusion_forward: got " + std::to_string(branch_outs.size()) +
                     " branch outputs for " + std::to_string(cfg.branches.size()) +
                     " active branches");
  const size_t batch = branch_outs.front().size();
  std::vector<TensorPtr<T>> joint;
  joint.reserve(batch);
  for (size_t s = 0; s < batch; ++s) {
    std::vector<TensorPtr<T>> parts;
    parts.reserve(branch_outs.size());
    for (const auto& bo : branch_outs) parts.push_back(bo[s]);
    joint.push_back(parts.size() == 1 ? parts[0] : concat(tape, parts));
  }
  auto x = stack_rows(tape, joint);
  x = model_detail::dense_block_forward(tape, x, m.fusion.h1, mode, cfg.dropout_dense, rng);
  x = model_detail::dense_block_forward(tape, x, m.fusion.h2, mode, cfg.dropout_dense, rng);
  auto logits = dense(tape, x, m.fusion.out_w, m.fusion.out_b);
  std::vector<TensorPtr<T>> out;
  out.reserve(batch);
  for (size_t s = 0; s < batch; ++s)
    out.push_back(slice_rows(tape, logits, s, 1)->reshaped({cfg.classes}));
  return out;
}

// Full model forward; one logits vector per sample.
template <class T>
std::vector<TensorPtr<T>> model_forward(Tape<T>& tape, Model<T>& m,
                                        const std::vector<const SampleFeatures<T>*>& samples,
                                        const ForwardOptions<T>& opts, RngStream& rng) {
  std::vector<std::vector<TensorPtr<T>>> branch_outs;
  branch_outs.reserve(m.cfg.branches.size());
  for (BranchId b : m.cfg.branches) {
    auto outs = branch_forward(tape, m, b, samples, opts.branch_mode, rng);
    if (opts.detach_features)
      for (auto& o : outs) o = detach(o);
    branch_outs.push_back(std::move(outs));
  }
  return fusion_forward(tape, m, branch_outs, opts.fusion_mode, rng);
}

template <class T>
struct Prediction {
  size_t label = 0;
  std::vector<T> probs;
};

// Deterministic eval-mode prediction for one sample.
template <class T>
Prediction<T> predict(Model<T>& m, const SampleFeatures<T>& sample) {
  Tape<T> tape;
  RngStream rng(0, "predict");
  ForwardOptions<T> opts;
  opts.branch_mode = Mode::eval;
  opts.fusion_mode = Mode::eval;
  auto logits = model_forward(tape, m, {&sample}, opts, rng);
  auto probs = softmax(tape, logits[0]);
  Prediction<T> out;
  out.probs.assign(probs->values().begin(), probs->values().end());
  for (size_t k = 1; k < out.probs.size(); ++k)
    if (out.probs[k] > out.probs[out.label]) out.label = k;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace model_detail {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline std::string read_str(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

constexpr uint32_t kCheckpointMagic = 0x5a464d45;  // "EMFZ"
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace model_detail

inline void write_model_config(std::ostream& os, const ModelConfig& cfg) {
  using namespace model_detail;
  uint32_t mask = 0;
  for (BranchId b : cfg.branches) mask |= 1u << static_cast<uint32_t>(b);
  write_u32(os, mask);
  write_f64(os, cfg.scale);
  write_u64(os, cfg.classes);
  write_u64(os, cfg.lld_dim);
  write_u64(os, cfg.word_dim);
  write_u64(os, cfg.pos_dim);
  write_u64(os, cfg.max_tokens);
  write_u64(os, cfg.mel_bands);
  write_u64(os, cfg.mfsc_frames);
  write_f64(os, cfg.dropout_conv);
  write_f64(os, cfg.dropout_dense);
  os.put(cfg.finetune_embeddings ? 1 : 0);
}

inline ModelConfig read_model_config(std::istream& is) {
  using namespace model_detail;
  ModelConfig cfg;
  const uint32_t mask = read_u32(is);
  cfg.branches.clear();
  for (uint32_t b = 0; b < 4; ++b)
    if (mask & (1u << b)) cfg.branches.push_back(static_cast<BranchId>(b));
  cfg.scale = read_f64(is);
  cfg.classes = read_u64(is);
  cfg.lld_dim = read_u64(is);
  cfg.word_dim = read_u64(is);
  cfg.pos_dim = read_u64(is);
  cfg.max_tokens = read_u64(is);
  cfg.mel_bands = read_u64(is);
  cfg.mfsc_frames = read_u64(is);
  cfg.dropout_conv = read_f64(is);
  cfg.dropout_dense = read_f64(is);
  cfg.finetune_embeddings = is.get() == 1;
  return cfg;
}

// Versioned binary checkpoint: header (magic, version, init seed, model
// configuration) followed by every registered tensor as
// (name, trainable, shape, float64 row-major values).
template <class T>
void save_checkpoint(const std::string& path, const Model<T>& m) {
  using namespace model_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  write_u32(os, kCheckpointMagic);
  write_u32(os, kCheckpointVersion);
  write_u64(os, m.init_seed);
  write_model_config(os, m.cfg);
  write_u64(os, m.params.entries().size());
  for (const auto& e : m.params.entries()) {
    write_str(os, e.name);
    os.put(e.trainable ? 1 : 0);
    write_u32(os, static_cast<uint32_t>(e.tensor->rank()));
    for (size_t d : e.tensor->shape()) write_u64(os, d);
    for (T v : e.tensor->values()) write_f64(os, static_cast<double>(v));
  }
  if (!os) throw IoError("error while writing checkpoint '" + path + "'");
}

// Rebuilds the model from the stored configuration and overwrites every
// tensor, validating names and shapes entry by entry.
template <class T>
Model<T> load_checkpoint(const std::string& path, std::shared_ptr<EmbeddingTable<T>> word_table) {
  using namespace model_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  if (read_u32(is) != kCheckpointMagic) throw ParseError("'" + path + "' is not a checkpoint file");
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t seed = read_u64(is);
  const ModelConfig cfg = read_model_config(is);
  Model<T> m = build_model<T>(cfg, seed, std::move(word_table));
  const uint64_t count = read_u64(is);
  if (count != m.params.entries().size())
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                     std::to_string(m.params.entries().size()));
  for (const auto& e : m.params.entries()) {
    const std::string name = read_str(is);
    if (name != e.name)
      throw ParseError("checkpoint tensor '" + name + "' does not match expected '" + e.name + "'");
    is.get();  // trainable flag, informational
    const uint32_t rank = read_u32(is);
    std::vector<size_t> shape(rank);
    for (auto& d : shape) d = read_u64(is);
    if (shape != e.tensor->shape())
      throw ParseError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                       ", expected " + shape_str(e.tensor->shape()));
    auto v = e.tensor->values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(read_f64(is));
  }
  if (!is) throw ParseError("checkpoint '" + path + "' ended unexpectedly");
  return m;
}

}  // namespace emofuse
