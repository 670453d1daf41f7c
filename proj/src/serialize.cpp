#include "morph/serialize.hpp"

#include <fstream>

#include "morph/errors.hpp"

namespace morph {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'B', '1'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("blob: truncated file");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void get_tensor(std::istream& is, const std::string& expected_name, Tensor& t) {
  auto name_len = get<std::uint32_t>(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (name != expected_name)
    throw DataError("blob: tensor '" + name + "' where '" + expected_name +
                    "' was expected (incompatible checkpoint)");
  auto rank = get<std::uint32_t>(is);
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is));
  if (shape != t.shape())
    throw DataError("blob: shape mismatch for tensor '" + name + "'");
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!is) throw DataError("blob: truncated tensor data");
}

}  // namespace

void save_blob(const std::filesystem::path& path, const ParamCollector& pc) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("blob: cannot open for write: " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kBlobVersion);
  put<std::uint32_t>(os,
                     static_cast<std::uint32_t>(pc.params.size() + pc.buffers.size()));
  for (const auto& p : pc.params) put_tensor(os, p.name, p.var->value);
  for (const auto& b : pc.buffers) put_tensor(os, b.name, *b.tensor);
  if (!os) throw DataError("blob: write failed: " + path.string());
}

void load_blob(const std::filesystem::path& path, ParamCollector& pc) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("blob: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kMagic, 4))
    throw DataError("blob: bad magic in " + path.string());
  auto version = get<std::uint32_t>(is);
  if (version != kBlobVersion)
    throw DataError("blob: unsupported version " + std::to_string(version));
  auto count = get<std::uint32_t>(is);
  if (count != pc.params.size() + pc.buffers.size())
    throw DataError("blob: tensor count mismatch in " + path.string());
  for (auto& p : pc.params) get_tensor(is, p.name, p.var->value);
  for (auto& b : pc.buffers) get_tensor(is, b.name, *b.tensor);
}

std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("hash: cannot open: " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[8192];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a_bytes(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for write: " + path.string());
  os << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace morph
