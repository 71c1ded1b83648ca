#include "dnas/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "dnas/errors.hpp"

namespace dnas {
namespace {

constexpr char kMagic[8] = {'D', 'N', 'A', 'S', 'C', 'K', 'P', 'T'};

void put_state(Checkpoint& c, const std::string& prefix, const std::vector<Param*>& params,
               const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < values.size() && i < params.size(); ++i) c.put(prefix + params[i]->name, values[i]);
}

std::vector<Tensor> get_state(const Checkpoint& c, const std::string& prefix, const std::vector<Param*>& params) {
  std::vector<Tensor> out;
  if (params.empty() || !c.has(prefix + params[0]->name)) return out;
  for (const Param* p : params) {
    const Tensor& t = c.tensor(prefix + p->name);
    if (t.shape() != p->value.shape()) throw IoError("checkpoint: optimizer state shape mismatch for " + p->name);
    out.push_back(t);
  }
  return out;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  Blob b;
  b.tensor = t;
  blobs_[name] = std::move(b);
}

void Checkpoint::put_bytes(const std::string& name, std::string bytes) {
  Blob b;
  b.is_bytes = true;
  b.bytes = std::move(bytes);
  blobs_[name] = std::move(b);
}

void Checkpoint::put_i64(const std::string& name, std::int64_t v) {
  std::string s(sizeof(v), '\0');
  std::memcpy(s.data(), &v, sizeof(v));
  put_bytes(name, std::move(s));
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  auto it = blobs_.find(name);
  if (it == blobs_.end() || it->second.is_bytes) throw IoError("checkpoint: missing tensor '" + name + "'");
  return it->second.tensor;
}

const std::string& Checkpoint::bytes(const std::string& name) const {
  auto it = blobs_.find(name);
  if (it == blobs_.end() || !it->second.is_bytes) throw IoError("checkpoint: missing entry '" + name + "'");
  return it->second.bytes;
}

std::int64_t Checkpoint::i64(const std::string& name) const {
  const std::string& s = bytes(name);
  if (s.size() != sizeof(std::int64_t)) throw IoError("checkpoint: entry '" + name + "' is not an integer");
  std::int64_t v;
  std::memcpy(&v, s.data(), sizeof(v));
  return v;
}

std::string Checkpoint::serialize() const {
  std::ostringstream os(std::ios::binary);
  io::put_bytes(os, kMagic, sizeof(kMagic));
  io::put<std::uint32_t>(os, kVersion);
  io::put_string(os, config_text);
  io::put<std::uint64_t>(os, blobs_.size());
  for (const auto& [name, b] : blobs_) {
    io::put_string(os, name);
    io::put<std::uint8_t>(os, b.is_bytes ? 1 : 0);
    if (b.is_bytes) {
      io::put_string(os, b.bytes);
    } else {
      io::put<std::uint32_t>(os, static_cast<std::uint32_t>(b.tensor.rank()));
      for (auto d : b.tensor.shape()) io::put<std::int64_t>(os, d);
      io::put_bytes(os, b.tensor.ptr(), static_cast<std::size_t>(b.tensor.numel()) * sizeof(double));
    }
  }
  return os.str();
}

Checkpoint Checkpoint::deserialize(const std::string& data) {
  std::istringstream is(data, std::ios::binary);
  char magic[8];
  io::get_bytes(is, magic, sizeof(magic), "checkpoint magic");
  if (!std::equal(magic, magic + 8, kMagic)) throw IoError("checkpoint: bad magic");
  const auto version = io::get<std::uint32_t>(is, "checkpoint version");
  if (version != kVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.config_text = io::get_string(is, "config text", data.size());
  const auto count = io::get<std::uint64_t>(is, "blob count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::get_string(is, "blob name", data.size());
    const auto kind = io::get<std::uint8_t>(is, "blob kind");
    if (kind == 1) {
      c.put_bytes(name, io::get_string(is, "blob bytes", data.size()));
    } else if (kind == 0) {
      const auto rank = io::get<std::uint32_t>(is, "blob rank");
      if (rank > 8) throw IoError("checkpoint: implausible rank for '" + name + "'");
      Shape shape(rank);
      std::int64_t numel = 1;
      for (auto& d : shape) {
        d = io::get<std::int64_t>(is, "blob dims");
        if (d < 0 || d > (std::int64_t{1} << 40)) throw IoError("checkpoint: bad dimension for '" + name + "'");
        numel *= d;
      }
      if (static_cast<std::uint64_t>(numel) * sizeof(double) > data.size())
        throw IoError("checkpoint: blob '" + name + "' exceeds file size");
      Tensor t(shape);
      io::get_bytes(is, t.ptr(), static_cast<std::size_t>(numel) * sizeof(double), "blob values");
      c.put(name, t);
    } else {
      throw IoError("checkpoint: unknown blob kind for '" + name + "'");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::string data = serialize();
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

Checkpoint capture(Supernet& net, const TrainState* state, const std::string& config_text, std::uint64_t seed) {
  Checkpoint c;
  c.config_text = config_text;
  StateRegistry reg = net.registry();
  for (const Param* p : reg.weights) c.put("w." + p->name, p->value);
  for (const Param* p : reg.arch) c.put("a." + p->name, p->value);
  for (const auto& [name, stats] : reg.buffers) {
    c.put("b." + name + ".mean", stats->running_mean);
    c.put("b." + name + ".var", stats->running_var);
  }
  c.put_i64("rng.seed", static_cast<std::int64_t>(seed));
  if (state) {
    put_state(c, "opt.sgd.", reg.weights, state->sgd.momentum());
    put_state(c, "opt.adam.m.", reg.arch, state->adam.first());
    put_state(c, "opt.adam.v.", reg.arch, state->adam.second());
    c.put_i64("opt.adam.t", state->adam.steps());
    c.put_i64("train.global_step", state->global_step);
    c.put_i64("train.next_epoch", state->next_epoch);
    c.put_i64("train.weight_updates", state->counters.weight_updates);
    c.put_i64("train.arch_updates", state->counters.arch_updates);
    const auto [pa, oa] = state->stream_a.position();
    const auto [pb, ob] = state->stream_b.position();
    c.put_i64("stream.A.pass", pa);
    c.put_i64("stream.A.offset", static_cast<std::int64_t>(oa));
    c.put_i64("stream.B.pass", pb);
    c.put_i64("stream.B.offset", static_cast<std::int64_t>(ob));
  }
  return c;
}

void restore(Supernet& net, TrainState* state, const Checkpoint& c) {
  StateRegistry reg = net.registry();
  auto load_into = [&c](Param& p, const std::string& key) {
    const Tensor& t = c.tensor(key);
    if (t.shape() != p.value.shape()) {
      throw IoError("checkpoint: '" + key + "' has shape " + to_string(t.shape()) + ", model expects " +
                    to_string(p.value.shape()));
    }
    p.value = t;
    p.zero_grad();
  };
  for (Param* p : reg.weights) load_into(*p, "w." + p->name);
  for (Param* p : reg.arch) load_into(*p, "a." + p->name);
  for (auto& [name, stats] : reg.buffers) {
    const Tensor& m = c.tensor("b." + name + ".mean");
    const Tensor& v = c.tensor("b." + name + ".var");
    if (m.shape() != stats->running_mean.shape() || v.shape() != stats->running_var.shape())
      throw IoError("checkpoint: running statistics shape mismatch for " + name);
    stats->running_mean = m;
    stats->running_var = v;
  }
  if (state && c.has("train.global_step")) {
    state->sgd.momentum() = get_state(c, "opt.sgd.", reg.weights);
    state->adam.first() = get_state(c, "opt.adam.m.", reg.arch);
    state->adam.second() = get_state(c, "opt.adam.v.", reg.arch);
    state->adam.set_steps(c.i64("opt.adam.t"));
    state->global_step = c.i64("train.global_step");
    state->next_epoch = static_cast<int>(c.i64("train.next_epoch"));
    state->counters.weight_updates = c.i64("train.weight_updates");
    state->counters.arch_updates = c.i64("train.arch_updates");
    if (!state->stream_a.pool().empty() || !state->stream_a.tail().empty())
      state->stream_a.seek(c.i64("stream.A.pass"), static_cast<std::size_t>(c.i64("stream.A.offset")));
    if (!state->stream_b.pool().empty() || !state->stream_b.tail().empty())
      state->stream_b.seek(c.i64("stream.B.pass"), static_cast<std::size_t>(c.i64("stream.B.offset")));
  }
}

}  // namespace dnas
