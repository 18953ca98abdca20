#include "mimicparts/io.hpp"

#include <fstream>
#include <sstream>

namespace mimicparts::io {

void write_json_block(std::ostream& os, const json& j) {
  std::string text = j.dump();
  uint32_t len = static_cast<uint32_t>(text.size());
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

json read_json_block(std::istream& is) {
  uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 4);
  if (!is) throw Error::io("truncated container: missing JSON header");
  if (len > (64u << 20)) throw Error::io("JSON header implausibly large");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw Error::io("truncated container: JSON header cut short");
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error::io("container JSON header does not parse");
  return j;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error::io("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::io("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error::io("short write to " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error::io("cannot create directory " + dir.string() + ": " + ec.message());
}

uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

std::string hash_file(const std::filesystem::path& path) {
  return hex64(fnv1a64(read_file(path)));
}

std::string hash_json(const json& j) { return hex64(fnv1a64(j.dump())); }

void save_checkpoint(const std::filesystem::path& path, const json& meta,
                     const ParamStore& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::io("cannot write checkpoint " + path.string());
  f.write("MPCK", 4);
  json head = meta;
  head["n_params"] = params.entries().size();
  write_json_block(f, head);
  for (const auto& e : params.entries()) {
    uint32_t len = static_cast<uint32_t>(e.name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(e.name.data(), len);
    e.value.save(f);
    e.adam_m.save(f);
    e.adam_v.save(f);
  }
  if (!f) throw Error::io("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error::prerequisite("missing checkpoint " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "MPCK") {
    throw Error::io("bad checkpoint magic in " + path.string());
  }
  Checkpoint ck;
  ck.meta = read_json_block(f);
  size_t n = ck.meta.value("n_params", size_t{0});
  for (size_t i = 0; i < n; ++i) {
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    if (!f || len > 4096) throw Error::io("corrupt checkpoint " + path.string());
    std::string name(len, '\0');
    f.read(name.data(), len);
    if (!f) throw Error::io("corrupt checkpoint " + path.string());
    Tensor value = Tensor::load(f);
    Tensor m = Tensor::load(f);
    Tensor v = Tensor::load(f);
    auto& entry = ck.params.declare(name, std::move(value));
    (void)entry;
    ck.params.entries().back().adam_m = std::move(m);
    ck.params.entries().back().adam_v = std::move(v);
  }
  return ck;
}

}  // namespace mimicparts::io
