#include "sat/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "sat/binary_io.hpp"

namespace sat {

namespace {
constexpr char kMagic[8] = {'S', 'A', 'T', 'C', 'K', 'P', 'T', '1'};
}

std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(kMagic, sizeof(kMagic));
  w.str(ckpt.header);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (numel(e.shape) != static_cast<std::int64_t>(e.data.size())) {
      throw FormatError("checkpoint entry '" + e.name + "' shape/data mismatch");
    }
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(e.data);
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  ByteReader r(bytes);
  Checkpoint ckpt;
  try {
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad checkpoint magic");
    ckpt.header = r.str();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      CheckpointEntry e;
      e.name = r.str();
      const auto rank = r.u32();
      if (rank > 8) throw FormatError("checkpoint entry '" + e.name + "' has implausible rank");
      for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u32());
      const auto n = numel(e.shape);
      if (n < 0 || static_cast<std::size_t>(n) * 4 > r.remaining()) throw TruncatedInput();
      e.data.resize(static_cast<std::size_t>(n));
      r.f32s(e.data);
      ckpt.entries.push_back(std::move(e));
    }
  } catch (const TruncatedInput&) {
    throw FormatError("truncated checkpoint");
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

void append_params(Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    ckpt.entries.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
}

void append_optimizer(Checkpoint& ckpt, const std::vector<NamedParam>& params, const OptimizerState& state) {
  const auto& c = state.config;
  ckpt.entries.push_back({"opt/hparams", {5}, {c.lr, c.beta1, c.beta2, c.eps, c.weight_decay}});
  ckpt.entries.push_back({"opt/step", {1}, {static_cast<float>(state.step)}});
  for (std::size_t k = 0; k < params.size(); ++k) {
    ckpt.entries.push_back({"opt/" + params[k].name + "/m", params[k].tensor.shape(), state.first_moment[k]});
    ckpt.entries.push_back({"opt/" + params[k].name + "/v", params[k].tensor.shape(), state.second_moment[k]});
  }
}

void load_params(const Checkpoint& ckpt, std::vector<NamedParam>& params) {
  for (auto& p : params) {
    const auto* e = ckpt.find(p.name);
    if (!e) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (e->shape != p.tensor.shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " + shape_str(e->shape) + ", expected " +
                        shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(e->data.begin(), e->data.end(), dst.begin());
  }
}

OptimizerState load_optimizer(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  const auto* hp = ckpt.find("opt/hparams");
  const auto* step = ckpt.find("opt/step");
  if (!hp || !step || hp->data.size() != 5 || step->data.size() != 1) {
    throw FormatError("checkpoint has no optimizer state");
  }
  AdamWConfig c{hp->data[0], hp->data[1], hp->data[2], hp->data[3], hp->data[4]};
  OptimizerState s = make_optimizer_state(params, c);
  s.step = static_cast<std::int64_t>(step->data[0]);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* m = ckpt.find("opt/" + params[k].name + "/m");
    const auto* v = ckpt.find("opt/" + params[k].name + "/v");
    if (!m || !v || m->data.size() != s.first_moment[k].size() || v->data.size() != s.second_moment[k].size()) {
      throw FormatError("optimizer moments missing for '" + params[k].name + "'");
    }
    s.first_moment[k] = m->data;
    s.second_moment[k] = v->data;
  }
  return s;
}

}  // namespace sat
