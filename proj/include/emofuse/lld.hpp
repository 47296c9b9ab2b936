// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Built-in low-level descriptor extractor and its functional statistics,
// plus max-min normalization and ingestion of externally computed feature
// vectors. The built-in set is a compact stand-in for large toolkit exports:
// 18 frame-level streams, each summarized by 11 functionals, giving a
// 198-dimensional vector.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/dsp.hpp"

namespace emofuse {

// Stream order: f0, voicing, rms, zcr, mfcc[1..mfcc_count], flatness,
// jitter, shimmer. Functional order below in `functionals`.
inline std::vector<std::string> lld_stream_names(const DspConfig& cfg) {
  std::vector<std::string> names = {"f0", "voicing", "rms", "zcr"};
  for (size_t j = 1; j <= cfg.mfcc_count; ++j) names.push_back("mfcc" + std::to_string(j));
  names.push_back("flatness");
  names.push_back("jitter");
  names.push_back("shimmer");
  return names;
}

inline std::vector<std::string> lld_functional_names() {
  return {"mean", "std",       "min", "max",  "range",   "median",
          "q1",   "q3",        "iqr", "skew", "kurtosis"};
}

inline size_t lld_builtin_dim(const DspConfig& cfg) {
  return lld_stream_names(cfg).size() * lld_functional_names().size();
}

// The 11 functional statistics of one frame-level stream.
inline std::vector<double> functionals(std::vector<double> xs) {
  if (xs.empty()) return std::vector<double>(11, 0.0);
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const double sd = std::sqrt(m2);
  const double skew = sd > 0 ? m3 / (sd * sd * sd) : 0.0;
  const double kurt = sd > 0 ? m4 / (m2 * m2) : 0.0;

  std::sort(xs.begin(), xs.end());
  auto quantile = [&xs](double p) {
    const double idx = p * static_cast<double>(xs.size() - 1);
    const size_t lo = static_cast<size_t>(idx);
    const size_t hi = std::min(lo + 1, xs.size() - 1);
    const double frac = idx - static_cast<double>(lo);
    return xs[lo] * (1.0 - frac) + xs[hi] * frac;
  };
  const double mn = xs.front(), mx = xs.back();
  const double q1 = quantile(0.25), med = quantile(0.5), q3 = quantile(0.75);
  return {mean, sd, mn, mx, mx - mn, med, q1, q3, q3 - q1, skew, kurt};
}

namespace detail {

struct F0Frame {
  double f0 = 0.0;       // Hz, 0 when unvoiced
  bool voiced = false;
  double peak_amp = 0.0;  // max |x| within the frame
};

// Normalized autocorrelation peak search over the configured lag range.
inline F0Frame analyze_f0_frame(const double* x, size_t n, const DspConfig& cfg) {
  F0Frame out;
  double energy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    energy += x[i] * x[i];
    out.peak_amp = std::max(out.peak_amp, std::abs(x[i]));
  }
  const double rms = std::sqrt(energy / static_cast<double>(n));
  if (rms < cfg.silence_rms) return out;

  const size_t lag_min = std::max<size_t>(1, static_cast<size_t>(cfg.sample_rate / cfg.f0_max_hz));
  const size_t lag_max =
      std::min(n - 1, static_cast<size_t>(cfg.sample_rate / cfg.f0_min_hz));
  if (lag_min >= lag_max) return out;

  std::vector<double> corr(lag_max + 1, -1.0);
  double best_r = -1.0;
  for (size_t lag = lag_min; lag <= lag_max; ++lag) {
    double num = 0.0, e0 = 0.0, e1 = 0.0;
    for (size_t i = 0; i + lag < n; ++i) {
      num += x[i] * x[i + lag];
      e0 += x[i] * x[i];
      e1 += x[i + lag] * x[i + lag];
    }
    const double denom = std::sqrt(e0 * e1);
    if (denom <= 0.0) continue;
    corr[lag] = num / denom;
    best_r = std::max(best_r, corr[lag]);
  }
  if (best_r < cfg.voicing_threshold) return out;
  // The autocorrelation of a periodic signal also peaks at lag multiples;
  // take the smallest local peak within tolerance of the global maximum.
  size_t best_lag = 0;
  for (size_t lag = lag_min; lag <= lag_max && best_lag == 0; ++lag) {
    const double r = corr[lag];
    if (r < 0.95 * best_r) continue;
    const double prev = lag > lag_min ? corr[lag - 1] : -1.0;
    const double next = lag < lag_max ? corr[lag + 1] : -1.0;
    if (r >= prev && r >= next) best_lag = lag;
  }
  if (best_lag > 0) {
    out.voiced = true;
    out.f0 = static_cast<double>(cfg.sample_rate) / static_cast<double>(best_lag);
  }
  return out;
}

}  // namespace detail

// Extracts the built-in LLD vector. Fully unvoiced audio yields zeros for
// every F0-derived stream, and the voicing stream's mean functional records
// a voiced fraction of 0.
inline std::vector<double> extract_lld(const AudioClip& clip, const DspConfig& cfg) {
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw ValueError("clip sample rate " + std::to_string(clip.sample_rate) +
                     " does not match configured rate " + std::to_string(cfg.sample_rate));
  if (clip.samples.empty()) throw ValueError("extract_lld: empty clip");

  // Prosody framing; short clips are zero-padded to one full frame.
  const size_t flen = cfg.f0_frame_len();
  const size_t hop = cfg.hop_len();
  std::vector<double> padded;
  const double* samples = clip.samples.data();
  size_t total = clip.samples.size();
  if (total < flen) {
    padded.assign(clip.samples.begin(), clip.samples.end());
    padded.resize(flen, 0.0);
    samples = padded.data();
    total = flen;
  }
  const size_t t_frames = frame_count(total, flen, hop);

  std::vector<double> f0_s(t_frames), voicing_s(t_frames), rms_s(t_frames), zcr_s(t_frames);
  std::vector<double> jitter_s(t_frames, 0.0), shimmer_s(t_frames, 0.0);
  std::vector<detail::F0Frame> frames(t_frames);
  for (size_t t = 0; t < t_frames; ++t) {
    const double* x = samples + t * hop;
    frames[t] = detail::analyze_f0_frame(x, flen, cfg);
    f0_s[t] = frames[t].f0;
    voicing_s[t] = frames[t].voiced ? 1.0 : 0.0;
    double energy = 0.0;
    size_t crossings = 0;
    for (size_t i = 0; i < flen; ++i) {
      energy += x[i] * x[i];
      if (i > 0 && x[i - 1] * x[i] < 0.0) ++crossings;
    }
    rms_s[t] = std::sqrt(energy / static_cast<double>(flen));
    zcr_s[t] = static_cast<double>(crossings) / static_cast<double>(flen - 1);
  }
  for (size_t t = 1; t < t_frames; ++t) {
    if (frames[t].voiced && frames[t - 1].voiced) {
      const double p0 = 1.0 / frames[t - 1].f0, p1 = 1.0 / frames[t].f0;
      jitter_s[t] = std::abs(p1 - p0) / ((p0 + p1) / 2.0);
    }
    const double a0 = frames[t - 1].peak_amp, a1 = frames[t].peak_amp;
    if ((a0 + a1) / 2.0 > 1e-8) shimmer_s[t] = std::abs(a1 - a0) / ((a0 + a1) / 2.0);
  }

  // Spectral streams on the analysis framing shared with the MFSC front end.
  std::vector<std::vector<double>> mfcc_s(cfg.mfcc_count);
  std::vector<double> flat_s;
  {
    AudioClip spec_clip{std::vector<double>(samples, samples + total), cfg.sample_rate};
    const size_t sflen = cfg.frame_len();
    if (spec_clip.samples.size() < sflen) spec_clip.samples.resize(sflen, 0.0);
    const size_t st = frame_count(spec_clip.samples.size(), sflen, hop);
    const auto window = hamming_window(sflen);
    const MelFilterbank bank(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
    flat_s.resize(st);
    for (auto& m : mfcc_s) m.resize(st);
    for (size_t t = 0; t < st; ++t) {
      const auto power =
          frame_power_spectrum(spec_clip.samples.data() + t * hop, sflen, cfg.n_fft, window);
      // Flatness: geometric over arithmetic mean of the power spectrum (DC excluded).
      double logsum = 0.0, sum = 0.0;
      const size_t kbins = power.size() - 1;
      for (size_t k = 1; k < power.size(); ++k) {
        const double p = std::max(power[k], 1e-12);
        logsum += std::log(p);
        sum += p;
      }
      flat_s[t] = std::exp(logsum / static_cast<double>(kbins)) /
                  (sum / static_cast<double>(kbins));
      // MFCCs: DCT-II over the log Mel bands, coefficients 1..mfcc_count.
      const auto mel = bank.apply(power);
      std::vector<double> logmel(mel.size());
      for (size_t b = 0; b < mel.size(); ++b) logmel[b] = std::log(std::max(mel[b], cfg.log_floor));
      for (size_t j = 1; j <= cfg.mfcc_count; ++j) {
        double c = 0.0;
        for (size_t b = 0; b < logmel.size(); ++b)
          c += logmel[b] * std::cos(3.14159265358979323846 * static_cast<double>(j) *
                                    (static_cast<double>(b) + 0.5) /
                                    static_cast<double>(logmel.size()));
        mfcc_s[j - 1][t] = c;
      }
    }
  }

  std::vector<double> out;
  out.reserve(lld_builtin_dim(cfg));
  auto push_stream = [&out](const std::vector<double>& s) {
    const auto f = functionals(s);
    out.insert(out.end(), f.begin(), f.end());
  };
  push_stream(f0_s);
  push_stream(voicing_s);
  push_stream(rms_s);
  push_stream(zcr_s);
  for (const auto& m : mfcc_s) push_stream(m);
  push_stream(flat_s);
  push_stream(jitter_s);
  push_stream(shimmer_s);
  return out;
}

// ---------------------------------------------------------------------------
// Max-min normalization
// ---------------------------------------------------------------------------

// Per-coordinate ranges learned on training data only.
struct MinMaxStats {
  std::vector<double> lo;
  std::vector<double> hi;

  size_t dim() const { return lo.size(); }
};

inline MinMaxStats fit_minmax(const std::vector<std::vector<double>>& train_vectors) {
  if (train_vectors.empty()) throw ValueError("fit_minmax: no training vectors");
  const size_t d = train_vectors.front().size();
  MinMaxStats stats;
  stats.lo.assign(d, 0.0);
  stats.hi.assign(d, 0.0);
  for (size_t j = 0; j < d; ++j) {
    stats.lo[j] = stats.hi[j] = train_vectors.front()[j];
  }
  for (const auto& v : train_vectors) {
    if (v.size() != d) throw ShapeError("fit_minmax: inconsistent vector dimensions");
    for (size_t j = 0; j < d; ++j) {
      stats.lo[j] = std::min(stats.lo[j], v[j]);
      stats.hi[j] = std::max(stats.hi[j], v[j]);
    }
  }
  return stats;
}

// (x - min) / (max - min), clipped to [0, 1]; constant coordinates map to 0.
inline std::vector<double> apply_minmax(const std::vector<double>& v, const MinMaxStats& stats) {
  if (v.size() != stats.dim())
    throw ShapeError("apply_minmax: vector dimension " + std::to_string(v.size()) +
                     " does not match stats dimension " + std::to_string(stats.dim()));
  std::vector<double> out(v.size());
  for (size_t j = 0; j < v.size(); ++j) {
    const double range = stats.hi[j] - stats.lo[j];
    if (range <= 0.0) {
      out[j] = 0.0;
    } else {
      out[j] = std::clamp((v[j] - stats.lo[j]) / range, 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// External feature ingestion
// ---------------------------------------------------------------------------

struct ExternalLldTable {
  std::map<std::string, std::vector<double>> rows;
  size_t dim = 0;
};

// Reads comma-separated rows of "sample_id,v1,...,vD". With expected_dim == 0
// the dimension is inferred from the first row; every row must then match it.
inline ExternalLldTable ingest_external_lld(const std::string& path, size_t expected_dim = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open external feature file '" + path + "'");
  ExternalLldTable table;
  table.dim = expected_dim;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    if (!std::getline(ss, field, ',') || field.empty())
      throw ParseError("external features line " + std::to_string(line_no) +
                       ": missing sample id");
    const std::string id = field;
    std::vector<double> values;
    while (std::getline(ss, field, ',')) {
      try {
        values.push_back(std::stod(field));
      } catch (const std::exception&) {
        throw ParseError("external features line " + std::to_string(line_no) + " (sample '" + id +
                         "'): bad number '" + field + "'");
      }
    }
    if (table.dim == 0) table.dim = values.size();
    if (values.size() != table.dim)
      throw ParseError("external features: sample '" + id + "' has " +
                       std::to_string(values.size()) + " values, expected " +
                       std::to_string(table.dim));
    if (table.rows.count(id))
      throw ParseError("external features: duplicate sample id '" + id + "'");
    table.rows[id] = std::move(values);
  }
  if (table.rows.empty()) throw ParseError("external feature file '" + path + "' is empty");
  return table;
}

}  // namespace emofuse
