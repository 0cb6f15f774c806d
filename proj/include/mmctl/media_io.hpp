#pragma once

#include <filesystem>

#include "mmctl/tensor.hpp"

namespace mmctl {

// Binary PPM (P6, maxval 255). frame: [h x w x 3] in [0, 1], clamped on write.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& frame);
Tensor<float> read_ppm(const std::filesystem::path& path);

// frames: [t x h x w x 3] written as dir/000.ppm, dir/001.ppm, ...
void write_frames(const std::filesystem::path& dir, const Tensor<float>& frames);
Tensor<float> read_frames(const std::filesystem::path& dir);

// Mono 16-bit little-endian PCM WAV. wave: [n] in [-1, 1], clamped on write.
void write_wav(const std::filesystem::path& path, const Tensor<float>& wave, int sample_rate);
struct WavData {
  Tensor<float> wave;
  int sample_rate = 0;
};
WavData read_wav(const std::filesystem::path& path);

// Frame/channel helpers for [t x h x w x 3] stacks.
Tensor<float> frame_at(const Tensor<float>& frames, Index i);           // -> [h x w x 3]
Tensor<float> stack_frames(const std::vector<Tensor<float>>& frames);   // [h x w x 3]... -> [t x h x w x 3]

}  // namespace mmctl
