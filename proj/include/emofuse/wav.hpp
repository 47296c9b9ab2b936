// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal RIFF/WAVE codec: PCM 16-bit mono little-endian only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/dsp.hpp"

namespace emofuse {

class WavError : public Error {
 public:
  enum class Kind { not_riff, bad_format, channels, bits, rate, truncated };

  WavError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace wav_detail {

inline uint32_t rd_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
inline uint16_t rd_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | p[1] << 8);
}

}  // namespace wav_detail

// Decodes a PCM 16-bit mono WAV file. Samples scale to [-1, 1] by 1/32768,
// so the most negative 16-bit value maps to exactly -1.0. The sample rate
// must equal the expected rate (no resampling).
inline AudioClip read_wav(const std::string& path, size_t expected_rate) {
  using namespace wav_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw WavError(WavError::Kind::not_riff, "'" + path + "' is not a RIFF/WAVE file");

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;

  size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const char* tag = reinterpret_cast<const char*>(bytes.data() + off);
    const uint32_t chunk_len = rd_u32(bytes.data() + off + 4);
    const size_t body = off + 8;
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (body + 16 > bytes.size())
        throw WavError(WavError::Kind::truncated, "'" + path + "': truncated fmt chunk");
      format = rd_u16(bytes.data() + body);
      channels = rd_u16(bytes.data() + body + 2);
      rate = rd_u32(bytes.data() + body + 4);
      bits = rd_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      data_off = body;
      data_len = chunk_len;
    }
    off = body + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt)
    throw WavError(WavError::Kind::bad_format, "'" + path + "': missing fmt chunk");
  if (format != 1)
    throw WavError(WavError::Kind::bad_format,
                   "'" + path + "': audio format " + std::to_string(format) + " is not PCM");
  if (channels != 1)
    throw WavError(WavError::Kind::channels, "'" + path + "': channel count " +
                                                 std::to_string(channels) + ", expected mono");
  if (bits != 16)
    throw WavError(WavError::Kind::bits,
                   "'" + path + "': " + std::to_string(bits) + "-bit samples, expected 16");
  if (expected_rate != 0 && rate != expected_rate)
    throw WavError(WavError::Kind::rate, "'" + path + "': sample rate " + std::to_string(rate) +
                                             ", expected " + std::to_string(expected_rate));
  if (data_off == 0 || data_off + data_len > bytes.size())
    throw WavError(WavError::Kind::truncated, "'" + path + "': truncated data chunk");

  AudioClip clip;
  clip.sample_rate = rate;
  const size_t n = data_len / 2;
  clip.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const int16_t s = static_cast<int16_t>(
        static_cast<uint16_t>(bytes[data_off + 2 * i] | bytes[data_off + 2 * i + 1] << 8));
    clip.samples[i] = static_cast<double>(s) / 32768.0;
  }
  if (clip.samples.empty())
    throw WavError(WavError::Kind::truncated, "'" + path + "': no audio samples");
  return clip;
}

// Writes PCM 16-bit mono; input is clamped to [-1, 1].
inline void write_wav(const std::string& path, const std::vector<double>& samples, size_t rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write WAV file '" + path + "'");
  auto w16 = [&out](uint16_t v) { out.put(static_cast<char>(v & 0xff)).put(static_cast<char>(v >> 8)); };
  auto w32 = [&out](uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  const uint32_t data_len = static_cast<uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  w32(36 + data_len);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  w32(16);
  w16(1);  // PCM
  w16(1);  // mono
  w32(static_cast<uint32_t>(rate));
  w32(static_cast<uint32_t>(rate * 2));
  w16(2);   // block align
  w16(16);  // bits per sample
  out.write("data", 4);
  w32(data_len);
  for (double s : samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const int16_t v = static_cast<int16_t>(std::lround(clamped * 32767.0));
    w16(static_cast<uint16_t>(v));
  }
  if (!out) throw IoError("error while writing WAV file '" + path + "'");
}

}  // namespace emofuse
