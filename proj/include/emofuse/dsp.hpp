// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Audio front end: framing, FFT, Mel filterbank, log-Mel spectral
// coefficients, regression deltas and fixed-size segmentation. All DSP runs
// in double precision regardless of the network scalar type.

#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "emofuse/common.hpp"

namespace emofuse {

struct AudioClip {
  std::vector<double> samples;  // mono, in [-1, 1]
  size_t sample_rate = 0;
};

struct DspConfig {
  size_t sample_rate = 16000;
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  size_t n_fft = 512;
  size_t n_mels = 64;
  double log_floor = 1e-10;
  size_t delta_window = 2;
  size_t context = 64;  // segment length in frames
  size_t shift = 15;    // segment stride in frames

  // Low-level descriptor settings.
  double f0_min_hz = 60.0;
  double f0_max_hz = 400.0;
  double f0_frame_ms = 40.0;
  double voicing_threshold = 0.5;
  double silence_rms = 1e-4;
  size_t mfcc_count = 11;

  size_t frame_len() const { return static_cast<size_t>(frame_ms * sample_rate / 1000.0); }
  size_t hop_len() const { return static_cast<size_t>(hop_ms * sample_rate / 1000.0); }
  size_t f0_frame_len() const { return static_cast<size_t>(f0_frame_ms * sample_rate / 1000.0); }

  void validate() const {
    if (sample_rate == 0) throw ConfigError("sample_rate must be positive");
    if (n_fft == 0 || (n_fft & (n_fft - 1)))
      throw ConfigError("n_fft must be a power of two, got " + std::to_string(n_fft));
    if (frame_len() == 0 || hop_len() == 0) throw ConfigError("frame_ms/hop_ms too small");
    if (frame_len() > n_fft)
      throw ConfigError("frame of " + std::to_string(frame_len()) + " samples exceeds n_fft " +
                        std::to_string(n_fft));
    if (n_mels == 0) throw ConfigError("n_mels must be positive");
    if (context == 0 || shift == 0) throw ConfigError("context/shift must be positive");
    if (f0_min_hz <= 0 || f0_max_hz <= f0_min_hz) throw ConfigError("bad F0 search range");
  }

  // Digest of everything that changes feature content; keys the feature cache.
  uint64_t hash() const {
    std::string s;
    auto app = [&s](double v) { s += std::to_string(v) + "|"; };
    app(static_cast<double>(sample_rate));
    app(frame_ms);
    app(hop_ms);
    app(static_cast<double>(n_fft));
    app(static_cast<double>(n_mels));
    app(log_floor);
    app(static_cast<double>(delta_window));
    app(static_cast<double>(context));
    app(static_cast<double>(shift));
    app(f0_min_hz);
    app(f0_max_hz);
    app(f0_frame_ms);
    app(voicing_threshold);
    app(silence_rms);
    app(static_cast<double>(mfcc_count));
    return fnv1a(s);
  }
};

// Row-major [frames x bands] feature matrix.
struct FrameMatrix {
  size_t frames = 0;
  size_t bands = 0;
  std::vector<double> v;

  FrameMatrix() = default;
  FrameMatrix(size_t f, size_t b) : frames(f), bands(b), v(f * b, 0.0) {}
  double& at(size_t t, size_t b_) { return v[t * bands + b_]; }
  double at(size_t t, size_t b_) const { return v[t * bands + b_]; }
};

// Per-utterance stack of fixed-size segments. Each segment holds
// context x bands x 3 values laid out (frame, band, plane) with plane order
// static, delta, double-delta.
struct MfscMap {
  size_t frames = 64;
  size_t bands = 64;
  size_t planes = 3;
  std::vector<std::vector<double>> segments;

  size_t segment_count() const { return segments.size(); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline std::vector<double> hamming_window(size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (size_t i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(i) /
                                  static_cast<double>(n - 1));
  return w;
}

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1))) throw ValueError("fft size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * 3.14159265358979323846 / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> t = a[i + j + len / 2] * w;
        a[i + j] = u + t;
        a[i + j + len / 2] = u - t;
        w *= wlen;
      }
    }
  }
}

inline size_t frame_count(size_t samples, size_t frame_len, size_t hop_len) {
  return (samples - frame_len) / hop_len + 1;
}

// Triangular Mel filterbank on FFT bin center frequencies, HTK mel scale,
// band edges spanning 0 Hz to Nyquist.
class MelFilterbank {
 public:
  MelFilterbank(size_t n_mels, size_t n_fft, size_t sample_rate)
      : n_mels_(n_mels), n_bins_(n_fft / 2 + 1), weights_(n_mels * n_bins_, 0.0) {
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(static_cast<double>(sample_rate) / 2.0);
    std::vector<double> edges(n_mels + 2);
    for (size_t m = 0; m < edges.size(); ++m)
      edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) /
                                        static_cast<double>(n_mels + 1));
    for (size_t m = 0; m < n_mels_; ++m) {
      const double f_lo = edges[m], f_c = edges[m + 1], f_hi = edges[m + 2];
      for (size_t k = 0; k < n_bins_; ++k) {
        const double f = static_cast<double>(k) * static_cast<double>(sample_rate) /
                         static_cast<double>(n_fft);
        double w = 0.0;
        if (f > f_lo && f < f_c)
          w = (f - f_lo) / (f_c - f_lo);
        else if (f >= f_c && f < f_hi)
          w = (f_hi - f) / (f_hi - f_c);
        weights_[m * n_bins_ + k] = w;
      }
    }
  }

  size_t n_mels() const { return n_mels_; }
  size_t n_bins() const { return n_bins_; }

  std::vector<double> apply(const std::vector<double>& power) const {
    if (power.size() != n_bins_)
      throw ShapeError("mel filterbank expects " + std::to_string(n_bins_) + " bins, got " +
                       std::to_string(power.size()));
    std::vector<double> out(n_mels_, 0.0);
    for (size_t m = 0; m < n_mels_; ++m) {
      const double* w = weights_.data() + m * n_bins_;
      double s = 0.0;
      for (size_t k = 0; k < n_bins_; ++k) s += w[k] * power[k];
      out[m] = s;
    }
    return out;
  }

 private:
  size_t n_mels_;
  size_t n_bins_;
  std::vector<double> weights_;
};

// Hamming-windowed magnitude-squared spectrum of one frame, zero-padded to
// n_fft.
inline std::vector<double> frame_power_spectrum(const double* frame, size_t frame_len,
                                                size_t n_fft, const std::vector<double>& window) {
  std::vector<std::complex<double>> buf(n_fft, {0.0, 0.0});
  for (size_t i = 0; i < frame_len; ++i) buf[i] = {frame[i] * window[i], 0.0};
  fft_inplace(buf);
  std::vector<double> power(n_fft / 2 + 1);
  for (size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
  return power;
}

// Mel filterbank energies before the log, [T x n_mels].
inline FrameMatrix stft_mel_energies(const AudioClip& clip, const DspConfig& cfg) {
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw ValueError("clip sample rate " + std::to_string(clip.sample_rate) +
                     " does not match configured rate " + std::to_string(cfg.sample_rate));
  const size_t frame_len = cfg.frame_len(), hop = cfg.hop_len();
  if (clip.samples.size() < frame_len)
    throw ValueError("clip of " + std::to_string(clip.samples.size()) +
                     " samples is shorter than one frame (" + std::to_string(frame_len) + ")");
  const size_t t_frames = frame_count(clip.samples.size(), frame_len, hop);
  const auto window = hamming_window(frame_len);
  const MelFilterbank bank(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
  FrameMatrix out(t_frames, cfg.n_mels);
  for (size_t t = 0; t < t_frames; ++t) {
    const auto power = frame_power_spectrum(clip.samples.data() + t * hop, frame_len, cfg.n_fft, window);
    const auto mel = bank.apply(power);
    for (size_t b = 0; b < cfg.n_mels; ++b) out.at(t, b) = mel[b];
  }
  return out;
}

// Log Mel-filterbank coefficients (no DCT), natural log with an energy floor.
inline FrameMatrix stft_log_mel(const AudioClip& clip, const DspConfig& cfg) {
  FrameMatrix m = stft_mel_energies(clip, cfg);
  for (double& x : m.v) x = std::log(std::max(x, cfg.log_floor));
  return m;
}

// Regression delta with edge replication:
//   d_t = sum_{n=1..N} n * (c_{t+n} - c_{t-n}) / (2 * sum_{n=1..N} n^2)
inline FrameMatrix delta(const FrameMatrix& features, size_t window = 2) {
  if (window == 0) throw ValueError("delta window must be positive");
  FrameMatrix out(features.frames, features.bands);
  double denom = 0.0;
  for (size_t n = 1; n <= window; ++n) denom += static_cast<double>(n * n);
  denom *= 2.0;
  const long t_max = static_cast<long>(features.frames) - 1;
  for (long t = 0; t <= t_max; ++t) {
    for (size_t b = 0; b < features.bands; ++b) {
      double acc = 0.0;
      for (long n = 1; n <= static_cast<long>(window); ++n) {
        const long hi = std::min(t + n, t_max);
        const long lo = std::max(t - n, 0L);
        acc += static_cast<double>(n) *
               (features.at(static_cast<size_t>(hi), b) - features.at(static_cast<size_t>(lo), b));
      }
      out.at(static_cast<size_t>(t), b) = acc / denom;
    }
  }
  return out;
}

// Cuts a [T x bands x 3] stack into overlapping context-length segments.
// T is zero-padded up to one full context if shorter; otherwise the segment
// count is (T - context) / shift + 1 and trailing frames that do not fill a
// window are dropped.
inline MfscMap segment_mfsc(const FrameMatrix& stat, const FrameMatrix& del,
                            const FrameMatrix& ddel, const DspConfig& cfg) {
  if (stat.frames != del.frames || stat.frames != ddel.frames || stat.bands != del.bands ||
      stat.bands != ddel.bands)
    throw ShapeError("segment_mfsc: static/delta/double-delta shapes differ");
  if (stat.frames == 0) throw ValueError("segment_mfsc: empty feature matrix");
  const size_t ctx = cfg.context, shift = cfg.shift, bands = stat.bands;
  const size_t t_eff = std::max(stat.frames, ctx);
  const size_t n = (t_eff - ctx) / shift + 1;

  MfscMap map;
  map.frames = ctx;
  map.bands = bands;
  map.planes = 3;
  map.segments.reserve(n);
  const FrameMatrix* planes[3] = {&stat, &del, &ddel};
  for (size_t s = 0; s < n; ++s) {
    std::vector<double> seg(ctx * bands * 3, 0.0);
    const size_t start = s * shift;
    for (size_t f = 0; f < ctx; ++f) {
      const size_t t = start + f;
      if (t >= stat.frames) break;  // zero padding past the end
      for (size_t b = 0; b < bands; ++b)
        for (size_t p = 0; p < 3; ++p) seg[(f * bands + b) * 3 + p] = planes[p]->at(t, b);
    }
    map.segments.push_back(std::move(seg));
  }
  return map;
}

// Full front end for one clip: log-Mel, delta, double-delta, segmentation.
inline MfscMap mfsc_map_from_clip(const AudioClip& clip, const DspConfig& cfg) {
  const FrameMatrix logmel = stft_log_mel(clip, cfg);
  const FrameMatrix d1 = delta(logmel, cfg.delta_window);
  const FrameMatrix d2 = delta(d1, cfg.delta_window);
  return segment_mfsc(logmel, d1, d2, cfg);
}

}  // namespace emofuse
