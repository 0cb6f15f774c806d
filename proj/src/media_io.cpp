#include "mmctl/media_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmctl {
namespace fs = std::filesystem;

namespace {

std::uint8_t to_byte(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  if (at + 4 > s.size()) throw FormatError("wav: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

std::uint16_t get_u16(const std::string& s, std::size_t at) {
  if (at + 2 > s.size()) throw FormatError("wav: truncated");
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) |
                                    (static_cast<unsigned char>(s[at + 1]) << 8));
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor<float>& frame) {
  if (frame.rank() != 3 || frame.dim(2) != 3) throw ShapeError("write_ppm: expected [h x w x 3]");
  std::string bytes = "P6\n" + std::to_string(frame.dim(1)) + " " + std::to_string(frame.dim(0)) + "\n255\n";
  bytes.reserve(bytes.size() + static_cast<std::size_t>(frame.size()));
  for (Index i = 0; i < frame.size(); ++i) bytes.push_back(static_cast<char>(to_byte(frame[i])));
  dump(path, bytes);
}

Tensor<float> read_ppm(const fs::path& path) {
  const std::string s = slurp(path);
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
      if (pos < s.size() && s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (start == pos) throw FormatError("ppm: truncated header in " + path.string());
    return s.substr(start, pos - start);
  };
  if (token() != "P6") throw FormatError("ppm: not a P6 file: " + path.string());
  const long w = std::stol(token()), h = std::stol(token()), maxval = std::stol(token());
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("ppm: unsupported geometry in " + path.string());
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(w * h * 3);
  if (pos + n > s.size()) throw FormatError("ppm: truncated pixel data in " + path.string());
  Tensor<float> frame({h, w, 3});
  for (std::size_t i = 0; i < n; ++i) {
    frame[static_cast<Index>(i)] = static_cast<float>(static_cast<unsigned char>(s[pos + i]) / 255.0);
  }
  return frame;
}

Tensor<float> frame_at(const Tensor<float>& frames, Index i) {
  if (frames.rank() != 4 || i < 0 || i >= frames.dim(0)) throw ShapeError("frame_at: out of range");
  const Index h = frames.dim(1), w = frames.dim(2), c = frames.dim(3);
  Tensor<float> f({h, w, c});
  std::copy_n(frames.data() + i * h * w * c, h * w * c, f.data());
  return f;
}

Tensor<float> stack_frames(const std::vector<Tensor<float>>& frames) {
  if (frames.empty()) throw ShapeError("stack_frames: empty");
  const Shape& s0 = frames.front().shape();
  Shape shape{static_cast<Index>(frames.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  Tensor<float> out(shape);
  const Index n = frames.front().size();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].shape() != s0) throw ShapeError("stack_frames: frame geometry differs");
    std::copy_n(frames[i].data(), n, out.data() + static_cast<Index>(i) * n);
  }
  return out;
}

void write_frames(const fs::path& dir, const Tensor<float>& frames) {
  if (frames.rank() != 4) throw ShapeError("write_frames: expected [t x h x w x 3]");
  fs::create_directories(dir);
  for (Index i = 0; i < frames.dim(0); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%03ld.ppm", static_cast<long>(i));
    write_ppm(dir / name, frame_at(frames, i));
  }
}

Tensor<float> read_frames(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor<float>> frames;
  for (const auto& f : files) frames.push_back(read_ppm(f));
  if (frames.empty()) throw InputError("no frames in " + dir.string());
  return stack_frames(frames);
}

void write_wav(const fs::path& path, const Tensor<float>& wave, int sample_rate) {
  if (wave.rank() != 1) throw ShapeError("write_wav: expected [n]");
  const auto n = static_cast<std::uint32_t>(wave.size());
  std::string b;
  b += "RIFF";
  put_u32(b, 36 + 2 * n);
  b += "WAVE";
  b += "fmt ";
  put_u32(b, 16);
  put_u16(b, 1);  // PCM
  put_u16(b, 1);  // mono
  put_u32(b, static_cast<std::uint32_t>(sample_rate));
  put_u32(b, static_cast<std::uint32_t>(sample_rate) * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b += "data";
  put_u32(b, 2 * n);
  for (Index i = 0; i < wave.size(); ++i) {
    const double c = std::clamp(static_cast<double>(wave[i]), -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0));
    put_u16(b, static_cast<std::uint16_t>(v));
  }
  dump(path, b);
}

WavData read_wav(const fs::path& path) {
  const std::string s = slurp(path);
  if (s.size() < 12 || s.compare(0, 4, "RIFF") != 0 || s.compare(8, 4, "WAVE") != 0) {
    throw FormatError("wav: not a RIFF/WAVE file: " + path.string());
  }
  std::size_t at = 12;
  int rate = 0, bits = 0, channels = 0;
  while (at + 8 <= s.size()) {
    const std::string id = s.substr(at, 4);
    const std::uint32_t len = get_u32(s, at + 4);
    const std::size_t body = at + 8;
    if (id == "fmt ") {
      if (get_u16(s, body) != 1) throw FormatError("wav: only PCM supported");
      channels = get_u16(s, body + 2);
      rate = static_cast<int>(get_u32(s, body + 4));
      bits = get_u16(s, body + 14);
    } else if (id == "data") {
      if (bits != 16 || channels != 1) throw FormatError("wav: only mono 16-bit supported");
      if (body + len > s.size()) throw FormatError("wav: truncated data chunk");
      const Index n = len / 2;
      Tensor<float> wave({n});
      for (Index i = 0; i < n; ++i) {
        const auto v = static_cast<std::int16_t>(get_u16(s, body + 2 * static_cast<std::size_t>(i)));
        wave[i] = static_cast<float>(v / 32767.0);
      }
      return {std::move(wave), rate};
    }
    at = body + len + (len & 1);
  }
  throw FormatError("wav: no data chunk in " + path.string());
}

}  // namespace mmctl
