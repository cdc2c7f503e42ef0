#include "mambacsr/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mambacsr/errors.hpp"

namespace mambacsr {

namespace {

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
  const std::string& bytes;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      throw ParseError(path + ": truncated " + what + " at offset " +
                       std::to_string(pos));
    }
  }
  uint16_t u16() {
    need(2, "u16");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    pos += 2;
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
  }
  uint32_t u32() {
    need(4, "u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(
               static_cast<unsigned char>(bytes[pos + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8, "u64");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(
               static_cast<unsigned char>(bytes[pos + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos += 8;
    return v;
  }
  uint8_t u8() {
    need(1, "u8");
    return static_cast<uint8_t>(bytes[pos++]);
  }
  std::string str(size_t n) {
    need(n, "string");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  void raw(void* dst, size_t n) {
    need(n, "raw values");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
};

void write_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(tmp + ": cannot open for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw IoError(tmp + ": write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError(path + ": rename failed: " + ec.message());
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path,
                     std::span<Parameter<T>* const> params) {
  std::string out;
  out += "MCSR";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    if (p->name.size() > 0xffff) {
      throw InvariantError("save_checkpoint: parameter name too long");
    }
    put_u16(out, static_cast<uint16_t>(p->name.size()));
    out += p->name;
    out.push_back(static_cast<char>(dtype_of<T>::value));
    out.push_back(static_cast<char>(p->value.rank()));
    for (int64_t d : p->value.shape()) put_u64(out, static_cast<uint64_t>(d));
    const auto v = p->value.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  write_atomic(path, out);
}

template <typename T>
void load_checkpoint(const std::string& path,
                     std::span<Parameter<T>* const> params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = std::move(ss).str();
  Reader r{bytes, 0, path};
  if (r.str(4) != "MCSR") {
    throw ParseError(path + ": bad magic at offset 0, expected MCSR");
  }
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError(path + ": unsupported version " + std::to_string(version));
  }
  const uint32_t count = r.u32();
  if (count != params.size()) {
    throw ParseError(path + ": parameter count " + std::to_string(count) +
                     " does not match model (" + std::to_string(params.size()) +
                     ")");
  }
  std::unordered_map<std::string, Parameter<T>*> by_name;
  for (Parameter<T>* p : params) by_name[p->name] = p;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    const uint8_t dtype = r.u8();
    const uint8_t rank = r.u8();
    std::vector<int64_t> shape(rank);
    for (int j = 0; j < rank; ++j) shape[static_cast<size_t>(j)] = static_cast<int64_t>(r.u64());
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ParseError(path + ": unknown parameter '" + name + "'");
    }
    Parameter<T>* p = it->second;
    if (dtype != static_cast<uint8_t>(dtype_of<T>::value)) {
      throw ParseError(path + ": dtype mismatch for '" + name + "'");
    }
    if (shape != p->value.shape()) {
      throw ParseError(path + ": shape mismatch for '" + name + "', stored " +
                       shape_to_string(shape) + " vs model " +
                       shape_to_string(p->value.shape()));
    }
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    r.raw(data.data(), data.size() * sizeof(T));
    p->value = Tensor<T>(shape, std::move(data));
  }
}

template void save_checkpoint<float>(const std::string&,
                                     std::span<Parameter<float>* const>);
template void save_checkpoint<double>(const std::string&,
                                      std::span<Parameter<double>* const>);
template void load_checkpoint<float>(const std::string&,
                                     std::span<Parameter<float>* const>);
template void load_checkpoint<double>(const std::string&,
                                      std::span<Parameter<double>* const>);

}  // namespace mambacsr
