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

// Waveform <-> log-mel conversion, Griffin-Lim phase reconstruction, and
// SpecAugment masking.

#pragma once

#include "lowres/tensor.hpp"

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace lowres {

using MelMatrix = Mat<float>;
using Waveform = std::vector<float>;

/// I/O or format failure on audio-related files.
class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MelConfig {
  int sample_rate = 16000;
  int frame_size = 800;  // 50 ms
  int hop_size = 200;    // 12.5 ms
  int n_mels = 80;
  int fft_size = 1024;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = std::log(1e-5);

  /// Throws ContractViolation when the fields are inconsistent.
  void validate() const;
  int frame_count(std::size_t samples) const;
};

struct MelSequence {
  MelMatrix frames;  // S x n_mels, log-mel energies
  std::optional<int> speaker;

  Index length() const { return frames.rows(); }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular mel filterbank (n_mels x (fft_size/2 + 1)), Slaney-style
/// area normalization off: each filter peaks at 1.
Mat<double> mel_filterbank(const MelConfig& cfg);

/// Center frequency in Hz of each mel band.
std::vector<double> mel_band_centers(const MelConfig& cfg);

/// Hann-windowed STFT magnitude: (frames x (fft_size/2 + 1)).
Mat<double> stft_magnitude(const Waveform& wave, const MelConfig& cfg);

/// S = floor((len - frame_size) / hop_size) + 1 frames of log-mel energy.
MelSequence mel_spectrogram(const Waveform& wave, const MelConfig& cfg);

struct GriffinLimTrace {
  /// Spectral-convergence error || |STFT(x_i)| - target || / ||target|| per iteration.
  std::vector<double> errors;
};

/// Reconstructs a waveform whose mel spectrogram approximates `mel`. The
/// linear magnitude target is the least-squares inverse of the filterbank;
/// phases are refined by Griffin-Lim for `iterations` rounds.
Waveform griffin_lim(const MelSequence& mel, const MelConfig& cfg, int iterations,
                     GriffinLimTrace* trace = nullptr);

struct SpecAugmentConfig {
  int time_masks = 2;
  int freq_masks = 2;
  int max_time_width = 20;
  int max_freq_width = 10;
};

/// Masks random time bands and frequency bands with the utterance mean.
/// Deterministic for a given seed; widths are clamped below each extent.
MelSequence spec_augment(const MelSequence& mel, const SpecAugmentConfig& cfg, std::uint64_t seed);

/// 16-bit PCM mono WAV.
Waveform read_wav(const std::filesystem::path& path, int* sample_rate = nullptr);
void write_wav(const std::filesystem::path& path, const Waveform& wave, int sample_rate);

/// Mel cache blob: int32 LE frame count, int32 LE n_mels, float32 LE row-major body.
void write_mel_blob(const std::filesystem::path& path, const MelMatrix& mel);
MelMatrix read_mel_blob(const std::filesystem::path& path);

}  // namespace lowres
