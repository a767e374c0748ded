#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

namespace vlseg {

// Flat archive of named arrays in the safetensors layout: an 8-byte
// little-endian header length, a JSON header, then raw tensor bytes.
// String metadata lives under the "__metadata__" header key.
struct TensorArchive {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

// In-memory form of the same layout; source only labels error messages.
std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::string& bytes, const std::string& source = "<memory>");

// Writes to a sibling temp file and renames over the destination.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

}  // namespace vlseg
