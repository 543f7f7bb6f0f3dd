#include "kcrl/numcore/io.hpp"

#include "kcrl/error.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace kcrl::nc {

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return fnv1a(bytes);
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

const Matrix& Blob::get(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw DataError("checkpoint has no tensor named '" + name + "'");
}

bool Blob::has(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return true;
  }
  return false;
}

namespace {

constexpr char kMagic[8] = {'K', 'C', 'R', 'L', 'B', 'L', 'O', 'B'};

template <typename T>
void put_pod(std::vector<std::uint8_t>& buf, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void doubles(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError(source_ + ": truncated checkpoint");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_blob(const std::filesystem::path& path, const Blob& blob) {
  std::vector<std::uint8_t> body;
  const std::string meta = blob.meta.dump();
  put_pod<std::uint64_t>(body, meta.size());
  body.insert(body.end(), meta.begin(), meta.end());
  put_pod<std::uint32_t>(body, static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& [name, m] : blob.tensors) {
    put_pod<std::uint32_t>(body, static_cast<std::uint32_t>(name.size()));
    body.insert(body.end(), name.begin(), name.end());
    put_pod<std::uint64_t>(body, static_cast<std::uint64_t>(m.rows()));
    put_pod<std::uint64_t>(body, static_cast<std::uint64_t>(m.cols()));
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    body.insert(body.end(), p, p + m.size() * sizeof(double));
  }
  std::vector<std::uint8_t> versioned;
  put_pod<std::uint32_t>(versioned, kBlobVersion);
  versioned.insert(versioned.end(), body.begin(), body.end());
  const std::uint64_t sum = fnv1a(versioned);

  std::string file(kMagic, kMagic + 8);
  file.append(reinterpret_cast<const char*>(versioned.data()), versioned.size());
  file.append(reinterpret_cast<const char*>(&sum), sizeof(sum));
  write_text_atomic(path, file);
}

Blob read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.size() < 8 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 8, 4);
  if (version != kBlobVersion) {
    throw VersionError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::span<const std::uint8_t> covered(bytes.data() + 8, bytes.size() - 16);
  if (fnv1a(covered) != stored) throw DataError(path.string() + ": checksum mismatch");

  const std::vector<std::uint8_t> body(bytes.begin() + 12, bytes.end() - 8);
  Reader r(body, path.string());
  Blob blob;
  const auto meta_len = r.pod<std::uint64_t>();
  try {
    blob.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad metadata: " + e.what());
  }
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.pod<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    r.doubles(m.data(), rows * cols);
    blob.tensors.emplace_back(std::move(name), std::move(m));
  }
  return blob;
}

void store_params(Blob& blob, const std::vector<Parameter*>& params) {
  for (const Parameter* p : params) blob.put(p->name, p->value);
}

void load_params(const Blob& blob, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Matrix& m = blob.get(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw DimensionError("checkpoint tensor " + p->name + " is " + shape_str(m) + ", model expects " +
                           shape_str(p->value));
    }
    p->value = m;
    p->zero_grad();
  }
}

}  // namespace kcrl::nc
