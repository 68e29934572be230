#include "uniprompt/checkpoint.hpp"

#include "uniprompt/rng.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <iterator>

namespace uniprompt {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

}  // namespace

std::string serialize_checkpoint(const std::vector<NamedTensor>& tensors) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  for (const auto& t : tensors) {
    require(!header.contains(t.name), "checkpoint: duplicate tensor name '" + t.name + "'");
    header[t.name] = {t.value.rows(), t.value.cols()};
  }
  const std::string text = header.dump();
  std::string out;
  put_u64(out, text.size());
  out += text;
  for (const auto& t : tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(t.value.data()[i]));
  return out;
}

std::vector<NamedTensor> parse_checkpoint(std::string_view bytes) {
  require(bytes.size() >= 8, "checkpoint: truncated header");
  const std::uint64_t len = get_u64(bytes, 0);
  require(bytes.size() >= 8 + len, "checkpoint: truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad header: ") + e.what());
  }
  require(header.is_object(), "checkpoint: header must be an object");
  std::vector<NamedTensor> out;
  std::size_t at = 8 + len;
  for (const auto& [name, shape] : header.items()) {
    require(shape.is_array() && shape.size() == 2, "checkpoint: bad shape for '" + name + "'");
    const auto rows = shape[0].get<Eigen::Index>(), cols = shape[1].get<Eigen::Index>();
    Matrix m(rows, cols);
    require(bytes.size() >= at + 8 * static_cast<std::size_t>(m.size()), "checkpoint: truncated payload");
    for (Eigen::Index i = 0; i < m.size(); ++i, at += 8) m.data()[i] = std::bit_cast<double>(get_u64(bytes, at));
    out.push_back({name, std::move(m)});
  }
  require(at == bytes.size(), "checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("checkpoint: cannot write " + path.string());
  const auto bytes = serialize_checkpoint(tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: missing file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

std::uint64_t checkpoint_hash(const std::vector<NamedTensor>& tensors) { return fnv1a64(serialize_checkpoint(tensors)); }

}  // namespace uniprompt
