// Copyright 2026 The lowres-speech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lowres/audio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <Eigen/QR>
#include <unsupported/Eigen/FFT>

namespace lowres {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void MelConfig::validate() const {
  require(sample_rate > 0, "MelConfig: sample_rate must be positive");
  require(frame_size > 0 && hop_size > 0, "MelConfig: frame and hop sizes must be positive");
  require(fft_size >= frame_size, "MelConfig: fft_size must be at least frame_size");
  require(n_mels >= 1, "MelConfig: n_mels must be positive");
  require(fmin >= 0 && fmin < fmax && fmax <= sample_rate / 2.0, "MelConfig: need 0 <= fmin < fmax <= sample_rate/2");
}

int MelConfig::frame_count(std::size_t samples) const {
  if (samples < static_cast<std::size_t>(frame_size)) return 0;
  return static_cast<int>((samples - static_cast<std::size_t>(frame_size)) / static_cast<std::size_t>(hop_size)) + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_band_centers(const MelConfig& cfg) {
  cfg.validate();
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> centers;
  for (int m = 1; m <= cfg.n_mels; ++m) centers.push_back(mel_to_hz(lo + (hi - lo) * m / (cfg.n_mels + 1)));
  return centers;
}

Mat<double> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const int bins = cfg.fft_size / 2 + 1;
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges;
  for (int m = 0; m < cfg.n_mels + 2; ++m) edges.push_back(mel_to_hz(lo + (hi - lo) * m / (cfg.n_mels + 1)));
  Mat<double> fb = Mat<double>::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double right = edges[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      double w = 0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      fb(m, k) = w;
    }
  }
  return fb;
}

namespace {

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

// One-sided complex STFT (frames x bins) of a windowed, zero-padded signal.
Mat<std::complex<double>> stft(const std::vector<double>& x, const MelConfig& cfg, int frames) {
  const auto window = hann(cfg.frame_size);
  const int bins = cfg.fft_size / 2 + 1;
  Eigen::FFT<double> fft;
  Mat<std::complex<double>> out(frames, bins);
  std::vector<double> buf(static_cast<std::size_t>(cfg.fft_size));
  std::vector<std::complex<double>> spec;
  for (int t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.hop_size);
    for (int i = 0; i < cfg.frame_size; ++i)
      buf[static_cast<std::size_t>(i)] = x[start + static_cast<std::size_t>(i)] * window[static_cast<std::size_t>(i)];
    fft.fwd(spec, buf);
    for (int k = 0; k < bins; ++k) out(t, k) = spec[static_cast<std::size_t>(k)];
  }
  return out;
}

// Least-squares signal whose STFT is closest to `spec` (one-sided, Hermitian
// completion implied).
std::vector<double> istft(const Mat<std::complex<double>>& spec, const MelConfig& cfg, std::size_t length) {
  const auto window = hann(cfg.frame_size);
  const int n = cfg.fft_size;
  Eigen::FFT<double> fft;
  std::vector<double> num(length, 0.0), den(length, 0.0);
  std::vector<std::complex<double>> full(static_cast<std::size_t>(n));
  std::vector<double> frame;
  for (Index t = 0; t < spec.rows(); ++t) {
    for (int k = 0; k <= n / 2; ++k) full[static_cast<std::size_t>(k)] = spec(t, k);
    for (int k = n / 2 + 1; k < n; ++k) full[static_cast<std::size_t>(k)] = std::conj(spec(t, n - k));
    full[0] = full[0].real();
    full[static_cast<std::size_t>(n / 2)] = full[static_cast<std::size_t>(n / 2)].real();
    fft.inv(frame, full);
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.hop_size);
    for (int i = 0; i < cfg.frame_size; ++i) {
      const double w = window[static_cast<std::size_t>(i)];
      num[start + static_cast<std::size_t>(i)] += w * frame[static_cast<std::size_t>(i)];
      den[start + static_cast<std::size_t>(i)] += w * w;
    }
  }
  for (std::size_t i = 0; i < length; ++i) num[i] = den[i] > 1e-12 ? num[i] / den[i] : 0.0;
  return num;
}

// Distance between one-sided magnitudes, weighted so it equals the
// full-spectrum Euclidean norm.
double spectral_distance(const Mat<double>& a, const Mat<double>& b, int fft_size) {
  double total = 0;
  for (Index t = 0; t < a.rows(); ++t)
    for (Index k = 0; k < a.cols(); ++k) {
      const double weight = (k == 0 || k == fft_size / 2) ? 1.0 : 2.0;
      const double d = a(t, k) - b(t, k);
      total += weight * d * d;
    }
  return std::sqrt(total);
}

}  // namespace

Mat<double> stft_magnitude(const Waveform& wave, const MelConfig& cfg) {
  cfg.validate();
  const int frames = cfg.frame_count(wave.size());
  require(frames > 0, "stft: waveform shorter than one frame");
  std::vector<double> x(wave.begin(), wave.end());
  return stft(x, cfg, frames).cwiseAbs();
}

MelSequence mel_spectrogram(const Waveform& wave, const MelConfig& cfg) {
  const Mat<double> mag = stft_magnitude(wave, cfg);
  const Mat<double> energies = mag * mel_filterbank(cfg).transpose();
  const double floor = std::exp(cfg.log_floor);
  MelSequence out;
  out.frames = energies.unaryExpr([floor](double e) { return std::log(std::max(e, floor)); }).cast<float>();
  return out;
}

Waveform griffin_lim(const MelSequence& mel, const MelConfig& cfg, int iterations, GriffinLimTrace* trace) {
  cfg.validate();
  require(iterations >= 1, "griffin_lim: iterations must be positive");
  require(mel.length() > 0 && mel.frames.cols() == cfg.n_mels, "griffin_lim: mel has wrong shape");
  const Mat<double> fb = mel_filterbank(cfg);
  const Mat<double> energies = mel.frames.cast<double>().array().exp().matrix();
  // Least-squares inverse of the filterbank, clipped to valid magnitudes.
  const Mat<double> pinv = fb.completeOrthogonalDecomposition().pseudoInverse();
  const Mat<double> target = (energies * pinv.transpose()).cwiseMax(0.0);

  const int frames = static_cast<int>(mel.length());
  const std::size_t length =
      static_cast<std::size_t>(frames - 1) * static_cast<std::size_t>(cfg.hop_size) + static_cast<std::size_t>(cfg.frame_size);
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
  Mat<std::complex<double>> spec(target.rows(), target.cols());
  for (Index i = 0; i < spec.size(); ++i) spec.data()[i] = std::polar(target.data()[i], angle(rng));
  std::vector<double> x = istft(spec, cfg, length);
  if (trace) trace->errors.clear();
  const double target_norm = std::max(spectral_distance(target, Mat<double>::Zero(target.rows(), target.cols()), cfg.fft_size), 1e-300);
  for (int it = 0; it < iterations; ++it) {
    const auto current = stft(x, cfg, frames);
    if (trace) trace->errors.push_back(spectral_distance(current.cwiseAbs(), target, cfg.fft_size) / target_norm);
    for (Index i = 0; i < spec.size(); ++i) {
      const auto c = current.data()[i];
      const double mag = std::abs(c);
      spec.data()[i] = mag > 0 ? c * (target.data()[i] / mag) : std::complex<double>(target.data()[i], 0.0);
    }
    x = istft(spec, cfg, length);
  }
  return Waveform(x.begin(), x.end());
}

MelSequence spec_augment(const MelSequence& mel, const SpecAugmentConfig& cfg, std::uint64_t seed) {
  require(cfg.time_masks >= 0 && cfg.freq_masks >= 0 && cfg.max_time_width >= 0 && cfg.max_freq_width >= 0,
          "spec_augment: mask counts and widths must be non-negative");
  MelSequence out = mel;
  const Index s = mel.frames.rows(), c = mel.frames.cols();
  if (s == 0 || c == 0) return out;
  const float fill = mel.frames.mean();
  std::mt19937_64 rng(seed);
  auto draw = [&rng](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  for (int m = 0; m < cfg.time_masks; ++m) {
    const Index width = draw(0, std::min<Index>(cfg.max_time_width, s - 1));
    const Index start = draw(0, s - width);
    out.frames.middleRows(start, width).setConstant(fill);
  }
  for (int m = 0; m < cfg.freq_masks; ++m) {
    const Index width = draw(0, std::min<Index>(cfg.max_freq_width, c - 1));
    const Index start = draw(0, c - width);
    out.frames.middleCols(start, width).setConstant(fill);
  }
  return out;
}

namespace {

template <typename T>
T read_le(std::istream& in, const std::string& what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw AudioError("truncated " + what);
  return value;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path, int* sample_rate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open " + path.string());
  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw AudioError(path.string() + ": not a RIFF file");
  read_le<std::uint32_t>(in, "RIFF header");
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw AudioError(path.string() + ": not a WAVE file");
  bool have_format = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (true) {
    in.read(tag, 4);
    if (!in) throw AudioError(path.string() + ": no data chunk");
    const auto size = read_le<std::uint32_t>(in, "chunk header");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const auto format = read_le<std::uint16_t>(in, "fmt chunk");
      channels = read_le<std::uint16_t>(in, "fmt chunk");
      rate = read_le<std::uint32_t>(in, "fmt chunk");
      read_le<std::uint32_t>(in, "fmt chunk");
      read_le<std::uint16_t>(in, "fmt chunk");
      bits = read_le<std::uint16_t>(in, "fmt chunk");
      if (size > 16) in.seekg(size - 16 + (size & 1), std::ios::cur);
      if (format != 1 || bits != 16 || channels != 1)
        throw AudioError(path.string() + ": only 16-bit PCM mono is supported");
      have_format = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_format) throw AudioError(path.string() + ": data chunk before fmt chunk");
      Waveform wave(size / 2);
      std::vector<std::int16_t> raw(size / 2);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
      if (!in) throw AudioError(path.string() + ": truncated data chunk");
      for (std::size_t i = 0; i < raw.size(); ++i) wave[i] = static_cast<float>(raw[i]) / 32768.0f;
      if (sample_rate) *sample_rate = static_cast<int>(rate);
      return wave;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& wave, int sample_rate) {
  require(sample_rate > 0, "write_wav: sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wave.size() * 2);
  out.write("RIFF", 4);
  write_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  write_le<std::uint32_t>(out, 16);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate) * 2);
  write_le<std::uint16_t>(out, 2);
  write_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  write_le<std::uint32_t>(out, data_bytes);
  for (float v : wave) {
    const float clipped = std::clamp(v, -1.0f, 1.0f);
    write_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clipped * 32767.0f)));
  }
  if (!out) throw AudioError("write failed for " + path.string());
}

void write_mel_blob(const std::filesystem::path& path, const MelMatrix& mel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write " + path.string());
  write_le<std::int32_t>(out, static_cast<std::int32_t>(mel.rows()));
  write_le<std::int32_t>(out, static_cast<std::int32_t>(mel.cols()));
  out.write(reinterpret_cast<const char*>(mel.data()), static_cast<std::streamsize>(mel.size() * sizeof(float)));
  if (!out) throw AudioError("write failed for " + path.string());
}

MelMatrix read_mel_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw AudioError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  const auto rows = read_le<std::int32_t>(in, "mel blob header in " + path.string());
  const auto cols = read_le<std::int32_t>(in, "mel blob header in " + path.string());
  if (rows < 0 || cols <= 0) throw AudioError(path.string() + ": invalid mel blob dimensions");
  const std::size_t expected = 8 + static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * sizeof(float);
  if (bytes != expected)
    throw AudioError(path.string() + ": mel blob holds " + std::to_string(bytes) + " bytes, expected " +
                     std::to_string(expected));
  MelMatrix mel(rows, cols);
  in.read(reinterpret_cast<char*>(mel.data()), static_cast<std::streamsize>(mel.size() * sizeof(float)));
  if (!in) throw AudioError("truncated mel blob " + path.string());
  return mel;
}

}  // namespace lowres
