#pragma once

// Per-image hierarchical representation built from overlapping binary masks:
// a patch partition (pixels grouped by identical mask membership), a voting
// correlation matrix between patches, and per-anchor hierarchy levels.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "omnifield/core.hpp"

namespace omnifield {

inline constexpr std::uint32_t kNullPatch = 0xFFFFFFFFu;

struct MaskSet {
  int width = 0;
  int height = 0;
  std::vector<Mask> masks;

  std::size_t size() const { return masks.size(); }

  void validate() const {
    require(!masks.empty(), "mask set is empty: no segmentation evidence");
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const auto& m = masks[k];
      require(m.width == width && m.height == height,
              "mask " + std::to_string(k) + " has size " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                  ", expected " + std::to_string(width) + "x" + std::to_string(height));
      require(count_set(m) > 0, "mask " + std::to_string(k) + " has no set pixels");
    }
  }
};

/// Row-packed bit matrix.
class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), words_((cols + 63) / 64), bits_(rows * words_, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return words_; }

  bool get(std::size_t r, std::size_t c) const { return (bits_[r * words_ + c / 64] >> (c % 64)) & 1u; }
  void set(std::size_t r, std::size_t c, bool v = true) {
    auto& w = bits_[r * words_ + c / 64];
    const std::uint64_t bit = std::uint64_t{1} << (c % 64);
    w = v ? (w | bit) : (w & ~bit);
  }
  std::span<const std::uint64_t> row(std::size_t r) const { return {bits_.data() + r * words_, words_}; }

  void append_row(std::span<const std::uint64_t> words) {
    bits_.insert(bits_.end(), words.begin(), words.end());
    ++rows_;
  }

  friend bool operator==(const BitMatrix&, const BitMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_ = 0;
  std::vector<std::uint64_t> bits_;
};

struct PatchPartition {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> patch_index_map;  // row-major, kNullPatch where no mask covers
  BitMatrix membership;                        // patch_count x mask_count
  std::vector<std::size_t> pixel_counts;

  std::size_t patch_count() const { return membership.rows(); }
  std::size_t mask_count() const { return membership.cols(); }
  std::uint32_t at(int x, int y) const { return patch_index_map[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const PatchPartition&, const PatchPartition&) = default;
};

struct CorrelationMatrix {
  std::size_t n = 0;
  std::vector<std::uint32_t> votes;

  std::uint32_t operator()(std::size_t i, std::size_t j) const { return votes[i * n + j]; }

  friend bool operator==(const CorrelationMatrix&, const CorrelationMatrix&) = default;
};

struct HierLevels {
  std::uint32_t anchor = 0;
  std::vector<std::vector<std::uint32_t>> levels;  // levels[d-1] = S_d, ascending ids
  std::vector<std::uint32_t> vote_of_level;

  std::size_t depth() const { return levels.size(); }
  friend bool operator==(const HierLevels&, const HierLevels&) = default;
};

struct HierRep {
  PatchPartition partition;
  CorrelationMatrix correlation;

  friend bool operator==(const HierRep&, const HierRep&) = default;
};

namespace detail {
struct WordsHash {
  std::size_t operator()(const std::vector<std::uint64_t>& w) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (auto x : w) {
      h ^= x + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};
}  // namespace detail

/// Groups pixels into equivalence classes of identical membership vectors.
/// Ids follow row-major first encounter; uncovered pixels get kNullPatch.
inline PatchPartition build_partition(const MaskSet& masks) {
  masks.validate();
  const std::size_t nm = masks.size();
  const std::size_t words = (nm + 63) / 64;
  const std::size_t npix = static_cast<std::size_t>(masks.width) * masks.height;

  PatchPartition out;
  out.width = masks.width;
  out.height = masks.height;
  out.patch_index_map.assign(npix, kNullPatch);
  out.membership = BitMatrix(0, nm);

  std::unordered_map<std::vector<std::uint64_t>, std::uint32_t, detail::WordsHash> ids;
  std::vector<std::uint64_t> key(words);
  for (std::size_t p = 0; p < npix; ++p) {
    std::fill(key.begin(), key.end(), 0);
    bool any = false;
    for (std::size_t k = 0; k < nm; ++k) {
      if (masks.masks[k].values[p]) {
        key[k / 64] |= std::uint64_t{1} << (k % 64);
        any = true;
      }
    }
    if (!any) continue;
    auto [it, inserted] = ids.try_emplace(key, static_cast<std::uint32_t>(out.pixel_counts.size()));
    if (inserted) {
      out.membership.append_row(key);
      out.pixel_counts.push_back(0);
    }
    out.patch_index_map[p] = it->second;
    ++out.pixel_counts[it->second];
  }
  return out;
}

/// votes = membership * membership^T, evaluated as popcounts of row ANDs.
inline CorrelationMatrix build_correlation(const PatchPartition& partition) {
  const std::size_t np = partition.patch_count();
  const auto& m = partition.membership;
  CorrelationMatrix c;
  c.n = np;
  c.votes.assign(np * np, 0);
  for (std::size_t i = 0; i < np; ++i) {
    const auto ri = m.row(i);
    for (std::size_t j = i; j < np; ++j) {
      const auto rj = m.row(j);
      std::uint32_t v = 0;
      for (std::size_t w = 0; w < ri.size(); ++w) v += static_cast<std::uint32_t>(std::popcount(ri[w] & rj[w]));
      c.votes[i * np + j] = v;
      c.votes[j * np + i] = v;
    }
  }
  return c;
}

inline HierRep build_hierrep(const MaskSet& masks) {
  HierRep rep;
  rep.partition = build_partition(masks);
  rep.correlation = build_correlation(rep.partition);
  return rep;
}

/// Groups patches by descending vote count against the anchor. Patches with
/// equal counts share a level; zero-vote patches are excluded.
inline HierLevels hierarchy_levels(const CorrelationMatrix& corr, std::uint32_t anchor) {
  require(anchor < corr.n, "anchor patch " + std::to_string(anchor) + " out of range [0, " + std::to_string(corr.n) + ")");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ranked;  // (votes, patch)
  for (std::uint32_t j = 0; j < corr.n; ++j) {
    const auto v = corr(anchor, j);
    if (v > 0) ranked.emplace_back(v, j);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  HierLevels out;
  out.anchor = anchor;
  for (const auto& [votes, patch] : ranked) {
    if (out.vote_of_level.empty() || out.vote_of_level.back() != votes) {
      out.vote_of_level.push_back(votes);
      out.levels.emplace_back();
    }
    out.levels.back().push_back(patch);
  }
  return out;
}

inline std::vector<HierLevels> all_hierarchy_levels(const CorrelationMatrix& corr) {
  std::vector<HierLevels> out;
  out.reserve(corr.n);
  for (std::uint32_t i = 0; i < corr.n; ++i) out.push_back(hierarchy_levels(corr, i));
  return out;
}

// ---------------------------------------------------------------------------
// Binary container
//
//   "OFHR" | u32 version | u32 endian tag | u32 H | u32 W | u32 N_p | u32 N_m
//   | H*W u32 patch ids (null = 0xFFFFFFFF)
//   | N_p rows of ceil(N_m/8) bytes, bit k of a row = mask k (LSB first)
//   | N_p*N_p u32 votes | u32 CRC-32 of all preceding bytes
// All integers little-endian.

inline constexpr std::uint32_t kHierRepVersion = 1;

inline std::string serialize_hierrep(const HierRep& rep) {
  const auto& part = rep.partition;
  require(rep.correlation.n == part.patch_count(), "hierrep: correlation size does not match patch count");
  ByteWriter w;
  w.magic("OFHR");
  w.u32(kHierRepVersion);
  w.u32(kEndianTag);
  w.u32(static_cast<std::uint32_t>(part.height));
  w.u32(static_cast<std::uint32_t>(part.width));
  w.u32(static_cast<std::uint32_t>(part.patch_count()));
  w.u32(static_cast<std::uint32_t>(part.mask_count()));
  for (auto id : part.patch_index_map) w.u32(id);
  const std::size_t row_bytes = (part.mask_count() + 7) / 8;
  for (std::size_t r = 0; r < part.patch_count(); ++r) {
    for (std::size_t b = 0; b < row_bytes; ++b) {
      std::uint8_t byte = 0;
      for (std::size_t bit = 0; bit < 8; ++bit) {
        const std::size_t k = b * 8 + bit;
        if (k < part.mask_count() && part.membership.get(r, k)) byte |= static_cast<std::uint8_t>(1u << bit);
      }
      w.u8(byte);
    }
  }
  for (auto v : rep.correlation.votes) w.u32(v);
  w.seal();
  return w.take();
}

inline HierRep deserialize_hierrep(std::string_view bytes) {
  ByteReader::verify_seal(bytes, "hierrep");
  ByteReader r(bytes.substr(0, bytes.size() - 4));
  r.expect_magic("OFHR", "hierrep");
  const auto version = r.u32();
  if (version != kHierRepVersion) fail(ErrorKind::format, "hierrep: unsupported version " + std::to_string(version));
  if (r.u32() != kEndianTag) fail(ErrorKind::format, "hierrep: endianness tag mismatch");
  HierRep rep;
  auto& part = rep.partition;
  part.height = static_cast<int>(r.u32());
  part.width = static_cast<int>(r.u32());
  const std::size_t np = r.u32();
  const std::size_t nm = r.u32();
  const std::size_t npix = static_cast<std::size_t>(part.width) * part.height;
  if (r.remaining() != npix * 4 + np * ((nm + 7) / 8) + np * np * 4) fail(ErrorKind::format, "hierrep: payload size mismatch");
  part.patch_index_map.resize(npix);
  part.pixel_counts.assign(np, 0);
  for (auto& id : part.patch_index_map) {
    id = r.u32();
    if (id != kNullPatch) {
      if (id >= np) fail(ErrorKind::format, "hierrep: patch id out of range");
      ++part.pixel_counts[id];
    }
  }
  part.membership = BitMatrix(np, nm);
  const std::size_t row_bytes = (nm + 7) / 8;
  for (std::size_t row = 0; row < np; ++row) {
    for (std::size_t b = 0; b < row_bytes; ++b) {
      const auto byte = r.u8();
      for (std::size_t bit = 0; bit < 8; ++bit) {
        const std::size_t k = b * 8 + bit;
        if (k < nm && (byte >> bit) & 1u) part.membership.set(row, k);
      }
    }
  }
  rep.correlation.n = np;
  rep.correlation.votes.resize(np * np);
  for (auto& v : rep.correlation.votes) v = r.u32();
  return rep;
}

struct HierRepMeta {
  std::string source_image;
  std::vector<std::string> mask_provenance;
  std::uint64_t masks_digest = 0;  // content_digest of the mask file the representation was built from
};

inline std::string format_hierrep_meta(const HierRepMeta& meta) {
  std::ostringstream out;
  out << "source_image " << meta.source_image << "\n";
  out << "masks_digest " << meta.masks_digest << "\n";
  out << "mask_count " << meta.mask_provenance.size() << "\n";
  for (std::size_t k = 0; k < meta.mask_provenance.size(); ++k) out << "mask " << k << " " << meta.mask_provenance[k] << "\n";
  return out.str();
}

inline HierRepMeta parse_hierrep_meta(std::string_view text) {
  HierRepMeta meta;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "source_image") {
      std::getline(ls >> std::ws, meta.source_image);
    } else if (key == "masks_digest") {
      ls >> meta.masks_digest;
    } else if (key == "mask") {
      std::size_t k;
      ls >> k;
      std::string prov;
      std::getline(ls >> std::ws, prov);
      if (meta.mask_provenance.size() <= k) meta.mask_provenance.resize(k + 1);
      meta.mask_provenance[k] = prov;
    }
  }
  return meta;
}

/// Writes `path` and its `path.meta` text sidecar.
inline void write_hierrep_file(const std::filesystem::path& path, const HierRep& rep, const HierRepMeta& meta) {
  write_file_atomic(path, serialize_hierrep(rep));
  auto side = path;
  side += ".meta";
  write_file_atomic(side, format_hierrep_meta(meta));
}

inline HierRep read_hierrep_file(const std::filesystem::path& path) { return deserialize_hierrep(read_file(path)); }

}  // namespace omnifield
