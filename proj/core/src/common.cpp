#include "hmr/common.hpp"

#include <unordered_set>

namespace hmr {

std::string to_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) throw InputError("sample_without_replacement: k > n");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  if (k * 3 >= n) {
    // Partial Fisher-Yates over an index array.
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const auto j =
          i + static_cast<int>(index(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)],
                idx[static_cast<std::size_t>(j)]);
      out.push_back(idx[static_cast<std::size_t>(i)]);
    }
  } else {
    std::unordered_set<int> seen;
    while (static_cast<int>(out.size()) < k) {
      const auto v = static_cast<int>(index(static_cast<std::uint64_t>(n)));
      if (seen.insert(v).second) out.push_back(v);
    }
  }
  return out;
}

}  // namespace hmr
