#pragma once

#include <array>
#include <map>
#include <optional>

#include "tzmm/types.hpp"

namespace tzmm {

// Stage-2 geometry: 4 KiB granule, 4 levels (0..3), 9 bits per level.
// Block entries at level 1 (1 GiB) and level 2 (2 MiB).
constexpr int kTttLevels = 4;
constexpr int kTttEntriesPerTable = 512;
constexpr u64 kPageShift = 12;
constexpr u64 kPagesPerBlock2M = 512;

inline int tttIndex(Ipa ipa, int level) {
  return static_cast<int>((ipa >> (kPageShift + 9 * (3 - level))) & 0x1ff);
}

inline u64 tttLevelSpanPages(int level) {
  return u64{1} << (9 * (3 - level));
}

struct TttAttrs {
  bool prot = true;
  bool readable = true;
  bool writable = true;
  bool operator==(const TttAttrs&) const = default;
};

struct TttEntry {
  enum class Kind { Invalid, Table, Page, Block } kind = Kind::Invalid;
  GranuleIndex target = 0;  // child table granule, page granule or block base
  TttAttrs attrs;
};

struct TttTable {
  std::array<TttEntry, kTttEntriesPerTable> entries{};
  int live = 0;  // non-Invalid entries
};

struct TttWalkResult {
  GranuleIndex granule;
  TttAttrs attrs;
  int level;  // level of the resolving leaf entry
};

/// A cVM's translation tree. Tables live in granules owned by the cVM;
/// this holds the logical entry arrays keyed by table granule.
class Ttt {
 public:
  explicit Ttt(GranuleIndex root = 0) : root_(root) { tables_[root] = {}; }

  GranuleIndex root() const { return root_; }

  bool hasTable(GranuleIndex g) const { return tables_.count(g) != 0; }
  TttTable& table(GranuleIndex g) { return tables_.at(g); }
  const TttTable& table(GranuleIndex g) const { return tables_.at(g); }
  const std::map<GranuleIndex, TttTable>& tables() const { return tables_; }

  void addTable(GranuleIndex g) { tables_[g] = {}; }
  void removeTable(GranuleIndex g) { tables_.erase(g); }

  /// Table granule serving `level` for this IPA, if the walk reaches it.
  std::optional<GranuleIndex> tableAt(Ipa ipa, int level) const {
    GranuleIndex cur = root_;
    for (int l = 0; l < level; ++l) {
      const TttEntry& e = tables_.at(cur).entries[tttIndex(ipa, l)];
      if (e.kind != TttEntry::Kind::Table) return std::nullopt;
      cur = e.target;
    }
    return cur;
  }

  /// Resolve an IPA to a physical granule through page or block leaves.
  std::optional<TttWalkResult> resolve(Ipa ipa) const {
    GranuleIndex cur = root_;
    for (int l = 0; l < kTttLevels; ++l) {
      const TttEntry& e = tables_.at(cur).entries[tttIndex(ipa, l)];
      switch (e.kind) {
        case TttEntry::Kind::Invalid:
          return std::nullopt;
        case TttEntry::Kind::Table:
          cur = e.target;
          break;
        case TttEntry::Kind::Page:
          return TttWalkResult{e.target, e.attrs, l};
        case TttEntry::Kind::Block: {
          u64 span = tttLevelSpanPages(l);
          u64 off = (ipa >> kPageShift) & (span - 1);
          return TttWalkResult{e.target + off, e.attrs, l};
        }
      }
    }
    return std::nullopt;
  }

  /// Every (page-ipa, granule) pair reachable through the tree.
  std::vector<std::pair<Ipa, TttWalkResult>> allMappings() const {
    std::vector<std::pair<Ipa, TttWalkResult>> out;
    collect(root_, 0, 0, out);
    return out;
  }

  /// Granules holding table nodes, walk path included.
  std::vector<GranuleIndex> tableGranules() const {
    std::vector<GranuleIndex> out;
    out.reserve(tables_.size());
    for (const auto& [g, _] : tables_) out.push_back(g);
    return out;
  }

 private:
  void collect(GranuleIndex tab, int level, Ipa prefix,
               std::vector<std::pair<Ipa, TttWalkResult>>& out) const {
    const TttTable& t = tables_.at(tab);
    for (int i = 0; i < kTttEntriesPerTable; ++i) {
      const TttEntry& e = t.entries[i];
      Ipa ipa = prefix | (static_cast<Ipa>(i) << (kPageShift + 9 * (3 - level)));
      switch (e.kind) {
        case TttEntry::Kind::Invalid:
          break;
        case TttEntry::Kind::Table:
          collect(e.target, level + 1, ipa, out);
          break;
        case TttEntry::Kind::Page:
          out.push_back({ipa, {e.target, e.attrs, level}});
          break;
        case TttEntry::Kind::Block: {
          u64 span = tttLevelSpanPages(level);
          for (u64 p = 0; p < span; ++p)
            out.push_back({ipa + (p << kPageShift), {e.target + p, e.attrs, level}});
          break;
        }
      }
    }
  }

  GranuleIndex root_;
  std::map<GranuleIndex, TttTable> tables_;
};

}  // namespace tzmm
