#include "mtat/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace mtat {
namespace {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::i64;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i64: return 8;
  }
  throw CheckpointError("unknown dtype tag " + std::to_string(static_cast<int>(d)));
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    std::uint8_t b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out.insert(out.end(), b, b + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  }
  void str32(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, const std::string& src) : buf(b), source(src) {}
  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n) {
      throw CheckpointError(source + ": truncated at offset " + std::to_string(pos) + " reading " + what +
                            " (needs " + std::to_string(n) + " bytes, " + std::to_string(buf.size() - pos) +
                            " left)");
    }
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::string str32(const char* what) { return str(get<std::uint32_t>(what), what); }
  const std::vector<std::uint8_t>& buf;
  std::string source;
  std::size_t pos = 0;
};

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
  if (has(name)) throw CheckpointError("duplicate checkpoint entry '" + name + "'");
  Entry e{name, dtype_of<T>(), t.shape(), {}};
  const auto bytes = std::as_bytes(t.data());
  e.payload.resize(bytes.size());
  std::memcpy(e.payload.data(), bytes.data(), bytes.size());
  entries.push_back(std::move(e));
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != dtype_of<T>()) throw CheckpointError("entry '" + name + "' has a different dtype");
  Tensor<T> t(e.shape);
  std::memcpy(t.data().data(), e.payload.data(), e.payload.size());
  return t;
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw CheckpointError("checkpoint has no entry '" + name + "'");
}

double Checkpoint::scalar(const std::string& name) const {
  const auto it = scalars.find(name);
  if (it == scalars.end()) throw CheckpointError("checkpoint has no scalar '" + name + "'");
  return it->second;
}

void Checkpoint::put_params(const std::string& prefix, const ParamSet<float>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) put(prefix + "." + ps.name(i), ps.value(i));
}

void Checkpoint::get_params(const std::string& prefix, ParamSet<float>& into) const {
  for (std::size_t i = 0; i < into.size(); ++i) {
    auto t = get<float>(prefix + "." + into.name(i));
    if (t.shape() != into.value(i).shape()) {
      throw CheckpointError("entry '" + prefix + "." + into.name(i) + "' has shape " + shape_str(t.shape()) +
                            ", network expects " + shape_str(into.value(i).shape()));
    }
    into.value(i) = std::move(t);
  }
}

void Checkpoint::put_optimizer(const std::string& prefix, const Optimizer<float>& opt, const ParamSet<float>& ps) {
  const auto& st = opt.state();
  scalars[prefix + ".t"] = static_cast<double>(st.t);
  scalars[prefix + ".lr"] = st.config.lr;
  scalars[prefix + ".beta1"] = st.config.beta1;
  scalars[prefix + ".beta2"] = st.config.beta2;
  scalars[prefix + ".eps"] = st.config.eps;
  texts[prefix + ".kind"] = to_string(opt.kind());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    put(prefix + ".m." + ps.name(i), st.m[i]);
    put(prefix + ".v." + ps.name(i), st.v[i]);
  }
}

void Checkpoint::get_optimizer(const std::string& prefix, Optimizer<float>& opt, const ParamSet<float>& ps) const {
  auto& st = opt.state();
  st.t = static_cast<std::uint64_t>(scalar(prefix + ".t"));
  st.config.lr = scalar(prefix + ".lr");
  st.config.beta1 = scalar(prefix + ".beta1");
  st.config.beta2 = scalar(prefix + ".beta2");
  st.config.eps = scalar(prefix + ".eps");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    st.m[i] = get<float>(prefix + ".m." + ps.name(i));
    st.v[i] = get<float>(prefix + ".v." + ps.name(i));
  }
}

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.bytes("MTAT", 4);
  w.put(kCheckpointVersion);
  w.bytes(c.config_digest.data(), c.config_digest.size());
  w.put(c.iteration);
  w.str32(c.rng_state);
  w.put(static_cast<std::uint32_t>(c.scalars.size()));
  for (const auto& [k, v] : c.scalars) {
    w.str32(k);
    w.put(v);
  }
  w.put(static_cast<std::uint32_t>(c.texts.size()));
  for (const auto& [k, v] : c.texts) {
    w.str32(k);
    w.str32(v);
  }
  w.put(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (e.name.size() > UINT16_MAX || e.shape.size() > UINT8_MAX) {
      throw CheckpointError("entry '" + e.name + "' cannot be encoded");
    }
    w.put(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.put(static_cast<std::uint8_t>(e.dtype));
    w.put(static_cast<std::uint8_t>(e.shape.size()));
    for (const auto d : e.shape) w.put(static_cast<std::uint64_t>(d));
    w.bytes(e.payload.data(), e.payload.size());
  }
  return std::move(w.out);
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.str(4, "magic") != "MTAT") throw CheckpointError(source + ": not an MTAT checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  r.need(32, "config digest");
  std::memcpy(c.config_digest.data(), bytes.data() + r.pos, 32);
  r.pos += 32;
  c.iteration = r.get<std::uint64_t>("iteration");
  c.rng_state = r.str32("rng state");
  for (auto n = r.get<std::uint32_t>("scalar count"); n > 0; --n) {
    auto k = r.str32("scalar name");
    c.scalars[k] = r.get<double>("scalar value");
  }
  for (auto n = r.get<std::uint32_t>("text count"); n > 0; --n) {
    auto k = r.str32("text name");
    c.texts[k] = r.str32("text value");
  }
  for (auto n = r.get<std::uint32_t>("entry count"); n > 0; --n) {
    Checkpoint::Entry e;
    e.name = r.str(r.get<std::uint16_t>("entry name length"), "entry name");
    e.dtype = static_cast<DType>(r.get<std::uint8_t>("dtype"));
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t count = 1;
    for (int i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint64_t>("dimension");
      if (d == 0 || d > (std::uint64_t{1} << 40)) {
        throw CheckpointError(source + ": entry '" + e.name + "' has invalid dimension at offset " +
                              std::to_string(r.pos - 8));
      }
      e.shape.push_back(static_cast<std::int64_t>(d));
      count *= d;
    }
    const std::size_t size = count * dtype_size(e.dtype);
    r.need(size, "tensor payload");
    e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + size));
    r.pos += size;
    c.entries.push_back(std::move(e));
  }
  if (r.pos != bytes.size()) {
    throw CheckpointError(source + ": " + std::to_string(bytes.size() - r.pos) + " trailing bytes at offset " +
                          std::to_string(r.pos));
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path);
}

std::array<std::uint8_t, 32> sha256(const std::string& text) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (!EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) || len != 32) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  return out;
}

std::string hex(const std::array<std::uint8_t, 32>& digest) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (const auto b : digest) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

template void Checkpoint::put(const std::string&, const Tensor<float>&);
template void Checkpoint::put(const std::string&, const Tensor<double>&);
template void Checkpoint::put(const std::string&, const Tensor<std::int64_t>&);
template Tensor<float> Checkpoint::get(const std::string&) const;
template Tensor<double> Checkpoint::get(const std::string&) const;
template Tensor<std::int64_t> Checkpoint::get(const std::string&) const;

}  // namespace mtat
