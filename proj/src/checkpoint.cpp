#include "mmctl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmctl {
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kOptimM = "optim.m.";
constexpr std::string_view kOptimV = "optim.v.";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  const char* take(std::size_t n, const char* what) {
    if (n > s_.size() - pos_) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    const char* p = s_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8, what));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

bool starts_with(const std::string& s, std::string_view p) { return s.compare(0, p.size(), p) == 0; }

}  // namespace

std::string encode_checkpoint(const CheckpointData& ck) {
  const std::string meta = ck.meta.dump();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (Index d : t.value.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    put_u64(out, offset);
    offset += 4 * static_cast<std::uint64_t>(t.value.size());
  }
  out.reserve(out.size() + offset);
  for (const auto& t : ck.tensors) {
    for (Index i = 0; i < t.value.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t.value[i]));
  }
  return out;
}

CheckpointData decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t meta_len = r.u32("metadata length");
  const char* meta = r.take(meta_len, "metadata");
  CheckpointData ck;
  try {
    ck.meta = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::uint32_t count = r.u32("tensor count");
  struct Pending {
    std::string name;
    Shape shape;
    std::uint64_t offset, bytes;
  };
  std::vector<Pending> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    const std::uint32_t name_len = r.u32("name length");
    p.name.assign(r.take(name_len, "tensor name"), name_len);
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("tensor " + p.name + " has implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64("shape");
      if (dim > (std::uint64_t{1} << 32)) throw FormatError("tensor " + p.name + " has an implausible extent");
      p.shape.push_back(static_cast<Index>(dim));
      n *= dim;
      if (n > (std::uint64_t{1} << 40)) throw FormatError("tensor " + p.name + " is implausibly large");
    }
    p.offset = r.u64("offset");
    p.bytes = 4 * n;
    table.push_back(std::move(p));
  }
  const std::size_t payload = r.pos();
  const std::uint64_t payload_len = r.remaining();
  std::uint64_t expected = 0;
  for (const auto& p : table) {
    if (p.offset != expected) throw FormatError("tensor " + p.name + " offset overlaps or leaves a gap");
    if (p.offset + p.bytes > payload_len) throw FormatError("checkpoint truncated inside tensor " + p.name);
    expected += p.bytes;
  }
  if (expected != payload_len) throw FormatError("checkpoint has trailing bytes after the payload");
  for (const auto& p : table) {
    Tensor<float> t(p.shape);
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + payload + p.offset);
    for (Index i = 0; i < t.size(); ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
      t[i] = std::bit_cast<float>(v);
    }
    ck.tensors.push_back({p.name, std::move(t)});
  }
  return ck;
}

void write_checkpoint_file(const fs::path& path, const CheckpointData& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(ck);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

CheckpointData read_checkpoint_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"layers", m.layers},         {"d_model", m.d_model},
          {"heads", m.heads},           {"ffn_mult", m.ffn_mult},
          {"sigma_dim", m.sigma_dim},   {"vocab_size", m.text.vocab_size},
          {"d_text", m.text.d_text},    {"max_text_len", m.text.max_text_len},
          {"max_frames", m.max_frames}, {"max_ref_frames", m.max_ref_frames},
          {"grid_full", m.grid_full},   {"video_dim", m.video_dim},
          {"audio_dim", m.audio_dim}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    m.layers = j.at("layers").get<Index>();
    m.d_model = j.at("d_model").get<Index>();
    m.heads = j.at("heads").get<Index>();
    m.ffn_mult = j.at("ffn_mult").get<Index>();
    m.sigma_dim = j.at("sigma_dim").get<Index>();
    m.text.vocab_size = j.at("vocab_size").get<Index>();
    m.text.d_text = j.at("d_text").get<Index>();
    m.text.max_text_len = j.at("max_text_len").get<Index>();
    m.max_frames = j.at("max_frames").get<Index>();
    m.max_ref_frames = j.at("max_ref_frames").get<Index>();
    m.grid_full = j.at("grid_full").get<Index>();
    m.video_dim = j.at("video_dim").get<Index>();
    m.audio_dim = j.at("audio_dim").get<Index>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }
}

CheckpointData model_checkpoint(const JointModel<float>& model, const AdamState<float>* state,
                                nlohmann::json extra_meta) {
  CheckpointData ck;
  ck.meta = std::move(extra_meta);
  ck.meta["model"] = model_config_json(model.config());
  ck.meta["phase"] = model.backbone_frozen() ? "control" : "pretrain";
  ck.meta["step"] = state ? state->step : 0;
  ck.meta["has_bypass"] = model.has_bypass();
  ck.meta["backbone_frozen"] = model.backbone_frozen();
  ck.meta["backbone_checksum"] = model.backbone_checksum();
  const auto& params = model.params();
  for (const auto& p : params) ck.tensors.push_back({p.name, p.value});
  if (state) {
    for (int i = 0; i < params.size(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (k < state->m.size() && state->m[k].size() != 0) {
        ck.tensors.push_back({std::string(kOptimM) + params[i].name, Tensor<float>::from_matrix(state->m[k])});
        ck.tensors.push_back({std::string(kOptimV) + params[i].name, Tensor<float>::from_matrix(state->v[k])});
      }
    }
  }
  return ck;
}

LoadedModel load_model(const CheckpointData& ck) {
  try {
    const ModelConfig cfg = model_config_from_json(ck.meta.at("model"));
    ParamStore<float> store;
    std::vector<const TensorEntry*> moments;
    for (const auto& t : ck.tensors) {
      if (starts_with(t.name, kOptimM) || starts_with(t.name, kOptimV)) {
        moments.push_back(&t);
        continue;
      }
      store.add(t.name, t.value.matrix());
    }
    LoadedModel out{JointModel<float>::from_store(cfg, std::move(store), ck.meta.at("has_bypass").get<bool>(),
                                                  ck.meta.at("backbone_frozen").get<bool>()),
                    {}, ck.meta};
    const std::string stored = ck.meta.at("backbone_checksum").get<std::string>();
    const std::string actual = out.model.backbone_checksum();
    if (stored != actual) throw StateError("backbone checksum mismatch: stored " + stored + ", computed " + actual);
    const auto n = static_cast<std::size_t>(out.model.params().size());
    out.state.m.resize(n);
    out.state.v.resize(n);
    out.state.step = ck.meta.at("step").get<std::uint64_t>();
    for (const TensorEntry* t : moments) {
      const bool is_m = starts_with(t->name, kOptimM);
      const std::string pname = t->name.substr(kOptimM.size());
      const auto id = out.model.params().find(pname);
      if (!id) throw FormatError("optimiser state for unknown parameter " + pname);
      const auto& shape = out.model.params()[*id].value.matrix();
      if (t->value.matrix().rows() != shape.rows() || t->value.matrix().cols() != shape.cols()) {
        throw FormatError("optimiser state shape mismatch for " + pname);
      }
      (is_m ? out.state.m : out.state.v)[static_cast<std::size_t>(*id)] = t->value.matrix();
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

LoadedModel load_model_file(const fs::path& path) { return load_model(read_checkpoint_file(path)); }

}  // namespace mmctl
