#include "cpm/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cpm/errors.hpp"

namespace cpm::archive {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'P', 'M', 'A', 'R', 'C', 'H', '\0'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("archive truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const Matrix& Archive::at(const std::string& name) const {
  for (const Tensor& t : tensors)
    if (t.name == name) return t.value;
  throw ParseError("archive has no tensor '" + name + "'");
}

bool Archive::contains(const std::string& name) const {
  for (const Tensor& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::string to_bytes(const Archive& archive) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const Tensor& t : archive.tensors) {
    index.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.value.size());
  }
  const std::string header = json{{"meta", archive.meta}, {"tensors", index}}.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, header.size());
  out += header;
  for (const Tensor& t : archive.tensors)
    out.append(reinterpret_cast<const char*>(t.value.data()), static_cast<std::size_t>(t.value.size()) * sizeof(double));
  return out;
}

Archive from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a checkpoint archive (bad magic)");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kFormatVersion)
    throw ParseError("unsupported archive version " + std::to_string(version));
  const auto header_len = take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw ParseError("archive header truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("archive header: ") + e.what());
  }
  pos += header_len;

  Archive a;
  const std::size_t payload = pos;
  const std::size_t payload_count = (bytes.size() - payload) / sizeof(double);
  try {
    a.meta = header.at("meta");
    for (const json& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto off = t.at("offset").get<std::uint64_t>();
      const auto count = static_cast<std::uint64_t>(rows * cols);
      if (rows < 0 || cols < 0 || off + count > payload_count)
        throw ParseError("archive tensor '" + t.at("name").get<std::string>() + "' exceeds the payload");
      Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + payload + off * sizeof(double), count * sizeof(double));
      a.tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("archive header: ") + e.what());
  }
  return a;
}

void save(const Archive& archive, const std::filesystem::path& path) {
  const std::string bytes = to_bytes(archive);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Archive load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return from_bytes(os.str());
}

}  // namespace cpm::archive
