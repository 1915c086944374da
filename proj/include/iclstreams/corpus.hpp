#ifndef ICLSTREAMS_CORPUS_HPP
#define ICLSTREAMS_CORPUS_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"

namespace icls {

// Byte-level tokenization: ids 0..255 are raw bytes, 256 marks a document
// boundary. No external vocabulary, and decode(encode(text)) == text for
// any byte string.
namespace tokens {
inline constexpr int kDocMarker = 256;
inline constexpr int kVocab = 257;
}  // namespace tokens

inline std::vector<int> encode_bytes(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

inline std::string decode_bytes(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == tokens::kDocMarker) continue;  // structural marker, no bytes
    if (id < 0 || id > 255)
      throw IndexError("decode_bytes: id " + std::to_string(id) +
                       " is not a byte token");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

struct TokenizedCorpus {
  std::vector<int> ids;                // byte tokens with doc markers
  std::vector<std::size_t> doc_starts; // index of each document's marker
  std::uint64_t digest = 0;            // FNV-1a over the token stream

  std::size_t size() const { return ids.size(); }
};

namespace detail {
inline std::uint64_t fnv1a_init() { return 0xcbf29ce484222325ull; }
inline std::uint64_t fnv1a_step(std::uint64_t h, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) {
    h ^= (v >> (8 * b)) & 0xffu;
    h *= 0x100000001b3ull;
  }
  return h;
}
}  // namespace detail

// Read one file or every regular file in a directory (sorted by path, so
// ingest order does not depend on directory enumeration order). Each
// document is preceded by a marker token.
inline TokenizedCorpus ingest(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_directory(path, ec)) {
    for (const auto& entry : fs::directory_iterator(path, ec))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw IoError("ingest: no regular files under directory " + path);
  } else if (fs::exists(path, ec)) {
    files.emplace_back(path);
  } else {
    throw IoError("ingest: cannot read " + path);
  }

  TokenizedCorpus corpus;
  std::uint64_t h = detail::fnv1a_init();
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("ingest: cannot open " + f.string());
    std::string content((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
    corpus.doc_starts.push_back(corpus.ids.size());
    corpus.ids.push_back(tokens::kDocMarker);
    h = detail::fnv1a_step(h, static_cast<std::uint32_t>(tokens::kDocMarker));
    for (unsigned char c : content) {
      corpus.ids.push_back(static_cast<int>(c));
      h = detail::fnv1a_step(h, static_cast<std::uint32_t>(c));
    }
  }
  corpus.digest = h;
  return corpus;
}

inline TokenizedCorpus ingest_text(const std::string& text) {
  TokenizedCorpus corpus;
  std::uint64_t h = detail::fnv1a_init();
  corpus.doc_starts.push_back(0);
  corpus.ids.push_back(tokens::kDocMarker);
  h = detail::fnv1a_step(h, static_cast<std::uint32_t>(tokens::kDocMarker));
  for (unsigned char c : text) {
    corpus.ids.push_back(static_cast<int>(c));
    h = detail::fnv1a_step(h, static_cast<std::uint32_t>(c));
  }
  corpus.digest = h;
  return corpus;
}

struct LmBatch {
  std::vector<std::vector<int>> inputs;   // batch x context
  std::vector<std::vector<int>> targets;  // inputs shifted by one
};

// Uniform windows over [first, last] valid offsets; target[t] = input[t+1]
// and no window crosses the corpus end.
inline LmBatch sample_lm_batch(const TokenizedCorpus& corpus, int context,
                               int batch, CounterRng& rng,
                               std::size_t region_begin = 0,
                               std::size_t region_end = 0) {
  if (context < 1 || batch < 1)
    throw ConfigError("sample_lm_batch: context and batch must be positive");
  const std::size_t end = region_end == 0 ? corpus.size() : region_end;
  if (end > corpus.size() || region_begin >= end)
    throw ConfigError("sample_lm_batch: bad region");
  const std::size_t len = end - region_begin;
  if (len <= static_cast<std::size_t>(context))
    throw ConfigError("sample_lm_batch: corpus region of " +
                      std::to_string(len) + " tokens is too short for context " +
                      std::to_string(context));
  LmBatch out;
  const std::size_t max_offset = len - context - 1;
  for (int b = 0; b < batch; ++b) {
    const std::size_t off =
        region_begin + static_cast<std::size_t>(rng.uniform_int(max_offset + 1));
    std::vector<int> in(corpus.ids.begin() + off, corpus.ids.begin() + off + context);
    std::vector<int> tg(corpus.ids.begin() + off + 1,
                        corpus.ids.begin() + off + 1 + context);
    out.inputs.push_back(std::move(in));
    out.targets.push_back(std::move(tg));
  }
  return out;
}

}  // namespace icls

#endif  // ICLSTREAMS_CORPUS_HPP
