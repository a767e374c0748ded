#include "vlseg/tokenizer.hpp"

#include <zlib.h>

#include <algorithm>
#include <climits>
#include <cstring>
#include <set>
#include <sstream>

#include "vlseg/error.hpp"

namespace vlseg {

namespace {

std::string utf8_encode(uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

// Decodes one code point starting at text[pos]; invalid bytes decode as themselves.
uint32_t utf8_next(const std::string& text, std::size_t& pos) {
  const auto c = static_cast<unsigned char>(text[pos]);
  int extra = 0;
  uint32_t cp = c;
  if (c >= 0xF0) {
    extra = 3;
    cp = c & 0x07;
  } else if (c >= 0xE0) {
    extra = 2;
    cp = c & 0x0F;
  } else if (c >= 0xC0) {
    extra = 1;
    cp = c & 0x1F;
  }
  if (extra > 0 && pos + extra >= text.size()) {
    ++pos;
    return c;
  }
  for (int i = 1; i <= extra; ++i) cp = (cp << 6) | (static_cast<unsigned char>(text[pos + i]) & 0x3F);
  pos += 1 + extra;
  return cp;
}

// Splits a UTF-8 string into code-point substrings.
std::vector<std::string> utf8_chars(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    utf8_next(text, pos);
    out.push_back(text.substr(start, pos - start));
  }
  return out;
}

bool is_space(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' || cp == 0x85 ||
         cp == 0xA0 || cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 ||
         cp == 0x202F || cp == 0x205F || cp == 0x3000;
}

bool is_digit(uint32_t cp) { return (cp >= '0' && cp <= '9') || cp == 0xB2 || cp == 0xB3 || cp == 0xB9; }

bool is_letter(uint32_t cp) {
  if (cp < 0x80) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  if (cp < 0xC0) return cp == 0xAA || cp == 0xB5 || cp == 0xBA;
  if (cp == 0xD7 || cp == 0xF7) return false;
  if (cp >= 0x2000 && cp <= 0x2BFF) return false;  // punctuation, symbols, arrows
  if (cp >= 0x3000 && cp <= 0x303F) return false;  // CJK punctuation
  return !is_space(cp);
}

uint32_t to_lower(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
  return cp;
}

std::string clean_text(const std::string& text) {
  std::string out;
  bool pending_space = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const uint32_t cp = utf8_next(text, pos);
    if (is_space(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out += utf8_encode(to_lower(cp));
  }
  return out;
}

std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (!file) throw LoadError("cannot open BPE vocabulary: " + path.string());
  std::string out;
  char buffer[1 << 16];
  int n;
  while ((n = gzread(file, buffer, sizeof(buffer))) > 0) out.append(buffer, n);
  gzclose(file);
  if (n < 0) throw LoadError("corrupt BPE vocabulary: " + path.string());
  return out;
}

}  // namespace

std::vector<int64_t> ByteTokenizer::encode(const std::string& text) const {
  std::vector<int64_t> ids;
  for (unsigned char c : clean_text(text)) ids.push_back(c);
  return ids;
}

ClipBpeTokenizer::ClipBpeTokenizer(const std::filesystem::path& merges_file) {
  // byte -> printable code point table
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<int> cs = bs;
  int n = 0;
  for (int b = 0; b < 256; ++b) {
    if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
      bs.push_back(b);
      cs.push_back(256 + n);
      ++n;
    }
  }
  byte_encoder_.assign(256, {});
  for (std::size_t i = 0; i < bs.size(); ++i) byte_encoder_[bs[i]] = utf8_encode(static_cast<uint32_t>(cs[i]));

  const std::string content = read_maybe_gzip(merges_file);
  std::istringstream lines(content);
  std::string line;
  std::getline(lines, line);  // version header
  std::vector<std::pair<std::string, std::string>> merges;
  const std::size_t merge_count = 49152 - 256 - 2;
  while (merges.size() < merge_count && std::getline(lines, line)) {
    const auto space = line.find(' ');
    if (space == std::string::npos) continue;
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }

  std::vector<std::string> vocab;
  for (int i = 0; i < 256; ++i) vocab.push_back(utf8_encode(static_cast<uint32_t>(cs[i])));
  for (int i = 0; i < 256; ++i) vocab.push_back(utf8_encode(static_cast<uint32_t>(cs[i])) + "</w>");
  for (std::size_t i = 0; i < merges.size(); ++i) {
    vocab.push_back(merges[i].first + merges[i].second);
    ranks_[merges[i]] = static_cast<int64_t>(i);
  }
  vocab.emplace_back("<|startoftext|>");
  vocab.emplace_back("<|endoftext|>");
  for (std::size_t i = 0; i < vocab.size(); ++i) encoder_.emplace(vocab[i], static_cast<int64_t>(i));
  start_ = encoder_.at("<|startoftext|>");
  end_ = encoder_.at("<|endoftext|>");
  cache_["<|startoftext|>"] = {"<|startoftext|>"};
  cache_["<|endoftext|>"] = {"<|endoftext|>"};
}

std::vector<std::string> ClipBpeTokenizer::pretokenize(const std::string& text) {
  static const char* const kSpecial[] = {"<|startoftext|>", "<|endoftext|>"};
  static const char* const kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    for (const char* special : kSpecial) {
      if (text.compare(pos, std::strlen(special), special) == 0) {
        tokens.emplace_back(special);
        pos += std::strlen(special);
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (text[pos] == '\'') {
      for (const char* c : kContractions) {
        const std::size_t len = std::strlen(c);
        if (pos + len <= text.size()) {
          bool eq = true;
          for (std::size_t k = 0; k < len; ++k)
            eq = eq && std::tolower(static_cast<unsigned char>(text[pos + k])) == c[k];
          if (eq) {
            tokens.push_back(text.substr(pos, len));
            pos += len;
            matched = true;
            break;
          }
        }
      }
      if (matched) continue;
    }
    std::size_t next = pos;
    const uint32_t cp = utf8_next(text, next);
    if (is_space(cp)) {
      pos = next;
      continue;
    }
    if (is_digit(cp)) {
      tokens.push_back(text.substr(pos, next - pos));
      pos = next;
      continue;
    }
    const bool letters = is_letter(cp);
    std::size_t end = next;
    while (end < text.size()) {
      std::size_t probe = end;
      const uint32_t c = utf8_next(text, probe);
      const bool same = letters ? is_letter(c) : (!is_letter(c) && !is_digit(c) && !is_space(c));
      if (!same) break;
      end = probe;
    }
    tokens.push_back(text.substr(pos, end - pos));
    pos = end;
  }
  return tokens;
}

std::vector<std::string> ClipBpeTokenizer::bpe(const std::string& token) const {
  if (auto it = cache_.find(token); it != cache_.end()) return it->second;
  std::vector<std::string> word = utf8_chars(token);
  if (word.empty()) return {};
  word.back() += "</w>";
  while (word.size() > 1) {
    int64_t best_rank = LLONG_MAX;
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < word.size(); ++i) {
      auto it = ranks_.find({word[i], word[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == LLONG_MAX) break;
    const std::string first = word[best], second = word[best + 1];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(word[i]);
        ++i;
      }
    }
    word = std::move(merged);
  }
  cache_[token] = word;
  return word;
}

std::vector<int64_t> ClipBpeTokenizer::encode(const std::string& text) const {
  std::vector<int64_t> ids;
  for (const auto& piece : pretokenize(clean_text(text))) {
    std::string mapped;
    for (unsigned char b : piece) mapped += byte_encoder_[b];
    if (piece == "<|startoftext|>" || piece == "<|endoftext|>") mapped = piece;
    for (const auto& sub : bpe(mapped)) {
      auto it = encoder_.find(sub);
      if (it == encoder_.end()) throw ValidationError("BPE produced unknown symbol '" + sub + "'");
      ids.push_back(it->second);
    }
  }
  return ids;
}

TokenizedPrompt tokenize_prompt(const Tokenizer& tokenizer, const std::string& text, int64_t context_length) {
  if (context_length < 2) throw ConfigError("context length must be at least 2");
  auto body = tokenizer.encode(text);
  TokenizedPrompt out;
  out.ids.assign(context_length, 0);
  const auto room = static_cast<std::size_t>(context_length - 2);
  if (body.size() > room) {
    out.truncated = true;
    body.resize(room);
  }
  out.ids[0] = tokenizer.start_token();
  std::copy(body.begin(), body.end(), out.ids.begin() + 1);
  out.end_position = static_cast<int64_t>(body.size()) + 1;
  out.ids[out.end_position] = tokenizer.end_token();
  return out;
}

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& kind, const std::filesystem::path& vocab_path) {
  if (kind == "byte") return std::make_unique<ByteTokenizer>();
  if (kind == "clip-bpe") {
    if (vocab_path.empty()) throw ConfigError("clip-bpe tokenizer needs a vocabulary file");
    return std::make_unique<ClipBpeTokenizer>(vocab_path);
  }
  throw ConfigError("unknown tokenizer kind: " + kind);
}

}  // namespace vlseg
