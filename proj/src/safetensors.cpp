#include "vlseg/safetensors.hpp"

#include <unistd.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vlseg/error.hpp"

namespace vlseg {

namespace {

using nlohmann::json;

std::string dtype_tag(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return "F32";
    case torch::kFloat64: return "F64";
    case torch::kInt64: return "I64";
    case torch::kInt32: return "I32";
    case torch::kUInt8: return "U8";
    case torch::kBool: return "BOOL";
    case torch::kFloat16: return "F16";
    case torch::kBFloat16: return "BF16";
    default: throw ValidationError(std::string("unsupported tensor dtype for archive: ") + c10::toString(type));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "F32") return torch::kFloat32;
  if (tag == "F64") return torch::kFloat64;
  if (tag == "I64") return torch::kInt64;
  if (tag == "I32") return torch::kInt32;
  if (tag == "U8") return torch::kUInt8;
  if (tag == "BOOL") return torch::kBool;
  if (tag == "F16") return torch::kFloat16;
  if (tag == "BF16") return torch::kBFloat16;
  throw LoadError("unsupported dtype tag in archive: " + tag);
}

}  // namespace

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // unique per writer so concurrent writers of one path never share a temp file
  static std::atomic<unsigned> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw LoadError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string encode_archive(const TensorArchive& archive) {
  json header = json::object();
  std::vector<torch::Tensor> ordered;
  std::size_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const std::size_t nbytes = t.numel() * t.element_size();
    header[name] = {{"dtype", dtype_tag(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
    ordered.push_back(t);
  }
  if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;

  std::string header_text = header.dump();
  // pad header so the data section stays 8-byte aligned
  while (header_text.size() % 8 != 0) header_text.push_back(' ');

  std::string bytes;
  bytes.reserve(8 + header_text.size() + offset);
  const std::uint64_t header_len = header_text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((header_len >> (8 * i)) & 0xff));
  bytes += header_text;
  for (const auto& t : ordered) {
    const auto* data = static_cast<const char*>(t.data_ptr());
    bytes.append(data, t.numel() * t.element_size());
  }
  return bytes;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  atomic_write(path, encode_archive(archive));
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open archive: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return decode_archive(buffer.str(), path.string());
}

TensorArchive decode_archive(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 8) throw LoadError("truncated archive: " + source);

  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (8 + header_len > bytes.size()) throw LoadError("corrupt archive header: " + source);

  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    throw LoadError("archive header is not valid JSON (" + source + "): " + e.what());
  }
  const std::size_t data_start = 8 + header_len;

  TensorArchive archive;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      archive.metadata = entry.get<std::map<std::string, std::string>>();
      continue;
    }
    const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || data_start + offsets[1] > bytes.size())
      throw LoadError("bad data offsets for '" + name + "' in " + source);
    auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const std::size_t nbytes = tensor.numel() * tensor.element_size();
    if (nbytes != offsets[1] - offsets[0])
      throw LoadError("size mismatch for '" + name + "' in " + source);
    std::memcpy(tensor.data_ptr(), bytes.data() + data_start + offsets[0], nbytes);
    archive.tensors.emplace(name, std::move(tensor));
  }
  return archive;
}

}  // namespace vlseg
