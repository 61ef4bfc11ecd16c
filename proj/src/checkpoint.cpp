#include <cstring>
#include <fstream>

#include <zlib.h>

#include "vf/error.hpp"
#include "vf/model.hpp"

namespace vf {

namespace {

constexpr char kMagic[4] = {'V', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::uint32_t crc_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

[[noreturn]] void bad(const std::filesystem::path& path, const std::string& why) {
  throw Error(ErrorKind::Format, path.string() + ": " + why);
}

}  // namespace

void write_container(const std::filesystem::path& path, nlohmann::ordered_json meta,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  std::string payload;
  auto entries = nlohmann::ordered_json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["dtype"] = "f32";
    e["offset"] = payload.size();
    e["nbytes"] = t->size() * 4;
    entries.push_back(std::move(e));
    for (float f : t->values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_le(payload, bits);
    }
  }
  meta["tensors"] = std::move(entries);
  meta["crc32"] = crc_of(payload);
  const std::string header = meta.dump();

  std::string blob(kMagic, 4);
  put_le(blob, kVersion);
  put_le(blob, static_cast<std::uint64_t>(header.size()));
  blob += header;
  blob += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw Error(ErrorKind::Input, "short write to " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot read " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());

  if (blob.size() < 16) bad(path, "file too short for a header");
  if (std::memcmp(blob.data(), kMagic, 4) != 0) bad(path, "bad magic");
  const auto version = get_le<std::uint32_t>(p + 4);
  if (version != kVersion) bad(path, "unsupported version " + std::to_string(version));
  const auto hlen = get_le<std::uint64_t>(p + 8);
  if (hlen > blob.size() - 16) bad(path, "truncated header");

  Container c;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    bad(path, std::string("header is not JSON: ") + e.what());
  }
  const std::string payload = blob.substr(16 + hlen);
  try {
    const auto declared = header.at("crc32").get<std::uint32_t>();
    std::uint64_t expected_len = 0;
    for (const auto& e : header.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f32") bad(path, name + ": unsupported dtype");
      std::uint64_t count = 1;
      for (auto s : shape) count *= s;
      if (nbytes != count * 4) bad(path, name + ": nbytes does not match shape");
      if (offset != expected_len) bad(path, name + ": tensors are not contiguous");
      expected_len += nbytes;
      if (expected_len > payload.size()) bad(path, "truncated payload");
      std::vector<float> data(count);
      for (std::uint64_t i = 0; i < count; ++i) {
        const auto bits = get_le<std::uint32_t>(
            reinterpret_cast<const unsigned char*>(payload.data()) + offset + 4 * i);
        std::memcpy(&data[i], &bits, 4);
      }
      if (!c.tensors.emplace(name, Tensor<float>(shape, std::move(data))).second)
        bad(path, "duplicate tensor " + name);
    }
    if (expected_len != payload.size()) bad(path, "payload length disagrees with the header");
    if (crc_of(payload) != declared) bad(path, "checksum mismatch");
  } catch (const nlohmann::json::exception& e) {
    bad(path, std::string("malformed header: ") + e.what());
  }
  header.erase("tensors");
  header.erase("crc32");
  c.meta = std::move(header);
  return c;
}

void save_checkpoint(const Weights<float>& w, const std::filesystem::path& path) {
  nlohmann::ordered_json meta;
  meta["config"] = w.config.to_json();
  write_container(path, std::move(meta), w.named());
}

Weights<float> load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (!c.meta.contains("config")) bad(path, "missing model config");
  auto w = Weights<float>::blank(ModelConfig::from_json(c.meta.at("config")));
  for (auto& [name, t] : w.named()) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) bad(path, "missing tensor " + name);
    if (it->second.shape() != t->shape()) bad(path, name + ": shape disagrees with config");
    *t = std::move(it->second);
    c.tensors.erase(it);
  }
  if (!c.tensors.empty()) bad(path, "unexpected tensor " + c.tensors.begin()->first);
  return w;
}

}  // namespace vf
