#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vlseg {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  // Token ids for the text, without start/end markers.
  virtual std::vector<int64_t> encode(const std::string& text) const = 0;
  virtual int64_t start_token() const = 0;
  virtual int64_t end_token() const = 0;
  virtual int64_t vocab_size() const = 0;
  virtual std::string name() const = 0;
};

// One token per UTF-8 byte; used by the tiny test text tower.
class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<int64_t> encode(const std::string& text) const override;
  int64_t start_token() const override { return 256; }
  int64_t end_token() const override { return 257; }
  int64_t vocab_size() const override { return 258; }
  std::string name() const override { return "byte"; }
};

// Byte-level BPE compatible with the published CLIP vocabulary
// (bpe_simple_vocab_16e6.txt[.gz]). Text is whitespace-normalized and
// lowercased; the ftfy/html cleanup step is not reproduced.
class ClipBpeTokenizer final : public Tokenizer {
 public:
  explicit ClipBpeTokenizer(const std::filesystem::path& merges_file);

  std::vector<int64_t> encode(const std::string& text) const override;
  int64_t start_token() const override { return start_; }
  int64_t end_token() const override { return end_; }
  int64_t vocab_size() const override { return static_cast<int64_t>(encoder_.size()); }
  std::string name() const override { return "clip-bpe"; }

  // Splits text into pre-tokens the way the CLIP regex does.
  static std::vector<std::string> pretokenize(const std::string& text);

 private:
  std::vector<std::string> bpe(const std::string& token) const;

  std::vector<std::string> byte_encoder_;  // byte -> UTF-8 of its mapped code point
  std::unordered_map<std::string, int64_t> encoder_;
  std::map<std::pair<std::string, std::string>, int64_t> ranks_;
  mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
  int64_t start_ = 0;
  int64_t end_ = 0;
};

struct TokenizedPrompt {
  std::vector<int64_t> ids;  // padded with zeros to the context length
  int64_t end_position = 0;
  bool truncated = false;
};

// [start] tokens [end], truncated to context_length (end marker kept) and zero padded.
TokenizedPrompt tokenize_prompt(const Tokenizer& tokenizer, const std::string& text, int64_t context_length);

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& kind, const std::filesystem::path& vocab_path = {});

}  // namespace vlseg
