#include "sim/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sim/dtype.hpp"
#include "sim/error.hpp"

namespace sim {

namespace {

constexpr char kMagic[8] = {'S', 'I', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n, const char* what) {
    SIM_CHECK(pos + n <= buf.size(),
              "checkpoint: " << path << " is truncated while reading " << what);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

uint8_t dtype_code(DType dt) { return dt == DType::F32 ? 0 : 1; }

DType code_dtype(uint8_t code, const std::string& path) {
  if (code == 0) return DType::F32;
  if (code == 1) return DType::F64;
  throw Error("checkpoint: " + path + " has unknown dtype code " + std::to_string(code));
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
  SIM_CHECK(find(name) == nullptr, "checkpoint: duplicate entry name " << name);
  entries.push_back({name, t});
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_u64(out, ckpt.step);
  put_u64(out, ckpt.seed);
  put_u64(out, ckpt.config_text.size());
  out += ckpt.config_text;
  SIM_CHECK(ckpt.entries.size() <= 0xffffffffu, "checkpoint: too many entries");
  put_u32(out, static_cast<uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    SIM_CHECK(e.name.size() <= 0xffffu, "checkpoint: entry name too long: " << e.name);
    put_u16(out, static_cast<uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(dtype_code(e.tensor.dtype())));
    SIM_CHECK(e.tensor.rank() <= 0xff, "checkpoint: rank too large for " << e.name);
    out.push_back(static_cast<char>(e.tensor.rank()));
    for (int64_t d : e.tensor.shape()) put_u64(out, static_cast<uint64_t>(d));
  }
  for (const auto& e : ckpt.entries) {
    dispatch(e.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const size_t nbytes = static_cast<size_t>(e.tensor.numel()) * sizeof(T);
      const size_t at = out.size();
      out.resize(at + nbytes);
      std::memcpy(out.data() + at, e.tensor.data<T>().data(), nbytes);
    });
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SIM_CHECK(f.good(), "checkpoint: cannot open " << path << " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  SIM_CHECK(f.good(), "checkpoint: write to " << path << " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SIM_CHECK(f.good(), "checkpoint: cannot open " << path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf, 0, path};
  const std::string magic = r.bytes(sizeof(kMagic), "magic");
  SIM_CHECK(std::memcmp(magic.data(), kMagic, sizeof(kMagic)) == 0,
            "checkpoint: " << path << " is not a checkpoint (bad magic)");
  const uint32_t version = r.u32("version");
  SIM_CHECK(version == kVersion,
            "checkpoint: " << path << " has unsupported version " << version);

  Checkpoint ckpt;
  ckpt.step = r.u64("step");
  ckpt.seed = r.u64("seed");
  const uint64_t cfg_len = r.u64("config length");
  ckpt.config_text = r.bytes(static_cast<size_t>(cfg_len), "config text");

  const uint32_t n = r.u32("entry count");
  struct Meta {
    std::string name;
    DType dt;
    Shape shape;
  };
  std::vector<Meta> metas;
  metas.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    Meta m;
    const uint16_t name_len = r.u16("entry name length");
    m.name = r.bytes(name_len, "entry name");
    m.dt = code_dtype(static_cast<uint8_t>(r.bytes(1, "dtype")[0]), path);
    const uint8_t rank = static_cast<uint8_t>(r.bytes(1, "rank")[0]);
    for (uint8_t d = 0; d < rank; ++d) {
      const uint64_t dim = r.u64("shape");
      SIM_CHECK(dim >= 1 && dim <= (1ull << 40),
                "checkpoint: " << path << " entry " << m.name << " has bad dim " << dim);
      m.shape.push_back(static_cast<int64_t>(dim));
    }
    metas.push_back(std::move(m));
  }
  for (const auto& m : metas) {
    Tensor t = Tensor::zeros(m.shape, m.dt);
    dispatch(m.dt, [&](auto tag) {
      using T = decltype(tag);
      const size_t nbytes = static_cast<size_t>(t.numel()) * sizeof(T);
      r.need(nbytes, m.name.c_str());
      std::memcpy(t.data<T>().data(), buf.data() + r.pos, nbytes);
      r.pos += nbytes;
    });
    ckpt.entries.push_back({m.name, t});
  }
  SIM_CHECK(r.pos == buf.size(), "checkpoint: " << path << " has " << buf.size() - r.pos
                                                << " trailing bytes");
  return ckpt;
}

}  // namespace sim
