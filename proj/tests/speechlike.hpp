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

// Speech-like test clips: a glottal pulse train with drifting pitch passed
// through drifting formant resonators, alternating with noisy fricative
// segments and short pauses.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace lowres::testing {

inline std::vector<float> speechlike_clip(double seconds, int sample_rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto n = static_cast<std::size_t>(seconds * sample_rate);
  std::vector<float> out(n);

  // Segment plan: voiced (~60%), fricative (~25%), pause.
  struct Segment {
    std::size_t end;
    int kind;
    double f1, f2, f0;
  };
  std::vector<Segment> plan;
  for (std::size_t pos = 0; pos < n;) {
    const auto len = static_cast<std::size_t>((0.06 + 0.18 * u(rng)) * sample_rate);
    const double r = u(rng);
    const int kind = r < 0.6 ? 0 : (r < 0.85 ? 1 : 2);
    plan.push_back({std::min(n, pos + len), kind, 300 + 600 * u(rng), 900 + 1600 * u(rng), 90 + 140 * u(rng)});
    pos += len;
  }

  double phase = 0, y1[2] = {0, 0}, y2[2] = {0, 0};
  std::size_t seg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (plan[seg].end <= i) ++seg;
    const auto& s = plan[seg];
    double excitation = 0;
    if (s.kind == 0) {
      phase += s.f0 / sample_rate;
      if (phase >= 1) {
        phase -= 1;
        excitation = 1.0;
      }
      excitation += 0.02 * noise(rng);
    } else if (s.kind == 1) {
      excitation = 0.3 * noise(rng);
    }
    // Two cascaded resonators.
    double x = excitation;
    const double freqs[2] = {s.f1, s.kind == 1 ? 4000.0 : s.f2};
    for (int k = 0; k < 2; ++k) {
      const double r = std::exp(-std::numbers::pi * 120.0 / sample_rate);
      const double c = 2 * r * std::cos(2 * std::numbers::pi * freqs[k] / sample_rate);
      const double y = x + c * y1[k] - r * r * y2[k];
      y2[k] = y1[k];
      y1[k] = y;
      x = y * (1 - r);
    }
    out[i] = static_cast<float>(x);
  }
  double peak = 1e-9;
  for (float v : out) peak = std::max(peak, static_cast<double>(std::abs(v)));
  for (float& v : out) v = static_cast<float>(0.5 * v / peak);
  return out;
}

}  // namespace lowres::testing
