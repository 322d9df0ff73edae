#ifndef GSC_BINARY_STATE_HPP
#define GSC_BINARY_STATE_HPP

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "gsc/error.hpp"

namespace gsc {

/// A point of {0,1}^H stored as its sorted list of active latent indices.
///
/// Canonical order is lexicographic on (s_0, ..., s_{H-1}) with 0 < 1, so for
/// H=4: 0000 < 0001 < 0010 < 0100 < 1000 < 1010.
class BinaryState {
 public:
  BinaryState() = default;
  explicit BinaryState(int H) : H_(H) {}
  BinaryState(int H, std::vector<int> active) : H_(H), active_(std::move(active)) {
    std::sort(active_.begin(), active_.end());
    active_.erase(std::unique(active_.begin(), active_.end()), active_.end());
    if (!active_.empty() && (active_.front() < 0 || active_.back() >= H_))
      throw DimensionError("BinaryState: active index out of range");
  }

  static BinaryState from_bits(const std::vector<int>& bits) {
    std::vector<int> act;
    for (int h = 0; h < static_cast<int>(bits.size()); ++h)
      if (bits[h]) act.push_back(h);
    return BinaryState(static_cast<int>(bits.size()), std::move(act));
  }

  /// State number m of the full enumeration in canonical order (s_0 is the
  /// most significant bit of m).
  static BinaryState from_index(int H, std::uint64_t m) {
    std::vector<int> act;
    for (int h = 0; h < H; ++h)
      if ((m >> (H - 1 - h)) & 1u) act.push_back(h);
    return BinaryState(H, std::move(act));
  }

  static BinaryState singleton(int H, int h) { return BinaryState(H, {h}); }

  int size() const { return H_; }
  int popcount() const { return static_cast<int>(active_.size()); }
  const std::vector<int>& active() const { return active_; }

  bool bit(int h) const { return std::binary_search(active_.begin(), active_.end(), h); }

  std::vector<int> bits() const {
    std::vector<int> b(H_, 0);
    for (int h : active_) b[h] = 1;
    return b;
  }

  std::string to_string() const {
    std::string s(H_, '0');
    for (int h : active_) s[h] = '1';
    return s;
  }

  friend bool operator==(const BinaryState& a, const BinaryState& b) {
    return a.H_ == b.H_ && a.active_ == b.active_;
  }

  /// Lexicographic on bits: compare the lowest index where the states differ;
  /// the state with the bit set there is larger.
  friend bool operator<(const BinaryState& a, const BinaryState& b) {
    if (a.H_ != b.H_) return a.H_ < b.H_;
    auto ia = a.active_.begin();
    auto ib = b.active_.begin();
    while (ia != a.active_.end() && ib != b.active_.end()) {
      if (*ia != *ib) return *ia > *ib;
      ++ia;
      ++ib;
    }
    return ia == a.active_.end() && ib != b.active_.end();
  }

 private:
  int H_ = 0;
  std::vector<int> active_;
};

/// All 2^H states in canonical order.
inline std::vector<BinaryState> enumerate_states(int H) {
  std::vector<BinaryState> out;
  out.reserve(std::size_t{1} << H);
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << H); ++m)
    out.push_back(BinaryState::from_index(H, m));
  return out;
}

}  // namespace gsc

#endif  // GSC_BINARY_STATE_HPP
