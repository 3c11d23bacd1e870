#pragma once

// Lowercase byte-pair tokenizer in the CLIP style: words are split into
// bytes, the last byte of each word carries an end-of-word marker, and
// ranked merges are applied greedily.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vilseg/data.hpp"
#include "vilseg/errors.hpp"

namespace vilseg {

class Tokenizer {
 public:
  using Merge = std::pair<std::string, std::string>;
  static constexpr std::string_view kEndOfWord = "</w>";
  static constexpr std::string_view kStartToken = "<|startoftext|>";
  static constexpr std::string_view kEndToken = "<|endoftext|>";
  static constexpr std::string_view kFileHeader = "#version: vilseg-bpe 1";

  Tokenizer() : Tokenizer(std::vector<Merge>{}) {}

  explicit Tokenizer(std::vector<Merge> merges) : merges_(std::move(merges)) {
    for (int b = 0; b < 256; ++b) add_symbol(std::string(1, static_cast<char>(b)));
    for (int b = 0; b < 256; ++b) add_symbol(std::string(1, static_cast<char>(b)) + std::string(kEndOfWord));
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [a, b] = merges_[r];
      if (!ids_.count(a) || !ids_.count(b)) {
        throw ParseError(r + 2, "merge references unknown symbol: " + a + " " + b);
      }
      ranks_[a + ' ' + b] = static_cast<int>(r);
      add_symbol(a + b);
    }
    start_ = add_symbol(std::string(kStartToken));
    end_ = add_symbol(std::string(kEndToken));
  }

  static Tokenizer parse(std::istream& in) {
    std::vector<Merge> merges;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      const auto space = line.find(' ');
      if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
          line.find(' ', space + 1) != std::string::npos) {
        throw ParseError(number, "expected '<left> <right>' merge");
      }
      merges.emplace_back(line.substr(0, space), line.substr(space + 1));
    }
    return Tokenizer(std::move(merges));
  }

  static Tokenizer from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tokenizer merges: " + path.string());
    return parse(in);
  }

  std::string serialize() const {
    std::ostringstream out;
    out << kFileHeader << '\n';
    for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
    return out.str();
  }

  const std::vector<Merge>& merges() const { return merges_; }
  int vocab_size() const { return static_cast<int>(symbols_.size()); }
  int start_token() const { return start_; }
  int end_token() const { return end_; }
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }

  /// Lowercases, trims and splits into words (letter runs, digit runs, single punctuation).
  static std::vector<std::string> pre_tokenize(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    int kind = 0;  // 1 letters, 2 digits
    auto flush = [&] {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      kind = 0;
    };
    for (unsigned char ch : text) {
      if (std::isspace(ch)) {
        flush();
      } else if (std::isalpha(ch) || ch >= 0x80) {
        if (kind != 1) flush();
        kind = 1;
        current.push_back(static_cast<char>(std::tolower(ch)));
      } else if (std::isdigit(ch)) {
        if (kind != 2) flush();
        kind = 2;
        current.push_back(static_cast<char>(ch));
      } else {
        flush();
        words.emplace_back(1, static_cast<char>(ch));
      }
    }
    flush();
    return words;
  }

  /// Applies ranked merges to one pre-tokenized word.
  std::vector<std::string> bpe(const std::string& word) const {
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < word.size(); ++i) parts.emplace_back(1, word[i]);
    if (parts.empty()) return parts;
    parts.back() += kEndOfWord;
    while (parts.size() > 1) {
      int best_rank = std::numeric_limits<int>::max();
      std::size_t best = 0;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto it = ranks_.find(parts[i] + ' ' + parts[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best = i;
        }
      }
      if (best_rank == std::numeric_limits<int>::max()) break;
      parts[best] += parts[best + 1];
      parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    }
    return parts;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& word : pre_tokenize(text)) {
      for (const auto& piece : bpe(word)) ids.push_back(ids_.at(piece));
    }
    return ids;
  }

  /// [start] + tokens + [end], truncated to max_length with the end token kept last.
  std::vector<int> encode_for_model(std::string_view text, int max_length) const {
    if (max_length < 2) throw ConfigError("max_text_length must be >= 2");
    if (trim(text).empty()) throw InputError("empty caption");
    std::vector<int> ids{start_};
    for (int id : encode(text)) ids.push_back(id);
    if (static_cast<int>(ids.size()) > max_length - 1) ids.resize(static_cast<std::size_t>(max_length - 1));
    ids.push_back(end_);
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == start_ || id == end_) continue;
      std::string s = symbol(id);
      if (s.size() >= kEndOfWord.size() && s.compare(s.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
        s.resize(s.size() - kEndOfWord.size());
        s += ' ';
      }
      out += s;
    }
    return trim(out);
  }

  /// Learns up to `num_merges` merges from a word-frequency corpus. Ties go to
  /// the lexicographically smallest pair, so the result is deterministic.
  static std::vector<Merge> learn_merges(const std::map<std::string, int>& word_counts, int num_merges) {
    std::vector<std::pair<std::vector<std::string>, int>> words;
    for (const auto& [text, count] : word_counts) {
      for (const auto& w : pre_tokenize(text)) {
        std::vector<std::string> parts;
        for (char ch : w) parts.emplace_back(1, ch);
        parts.back() += kEndOfWord;
        words.emplace_back(std::move(parts), count);
      }
    }
    std::vector<Merge> merges;
    for (int m = 0; m < num_merges; ++m) {
      std::map<Merge, long> pair_counts;
      for (const auto& [parts, count] : words) {
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) pair_counts[{parts[i], parts[i + 1]}] += count;
      }
      const Merge* best = nullptr;
      long best_count = 1;  // a pair must occur at least twice to be worth merging
      for (const auto& [pair, count] : pair_counts) {
        if (count > best_count) {
          best = &pair;
          best_count = count;
        }
      }
      if (!best) break;
      const Merge chosen = *best;
      merges.push_back(chosen);
      for (auto& [parts, count] : words) {
        for (std::size_t i = 0; i + 1 < parts.size();) {
          if (parts[i] == chosen.first && parts[i + 1] == chosen.second) {
            parts[i] += parts[i + 1];
            parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(i) + 1);
          } else {
            ++i;
          }
        }
      }
    }
    return merges;
  }

 private:
  int add_symbol(std::string s) {
    auto [it, inserted] = ids_.emplace(s, static_cast<int>(symbols_.size()));
    if (inserted) symbols_.push_back(std::move(s));
    return it->second;
  }

  std::vector<Merge> merges_;
  std::unordered_map<std::string, int> ranks_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> symbols_;
  int start_ = 0;
  int end_ = 0;
};

}  // namespace vilseg
