#include "region_scorer.h"

#include <algorithm>

namespace geclip::testing {

RegionTask::RegionTask() : pixels(Tensor::full({3, 32, 32}, 5.0)) {}

bool RegionTask::inside(std::size_t p) const {
  const std::size_t x = p % size, y = p / size;
  return x >= x0 && x < x1 && y >= y0 && y < y1;
}

explain::HeatMap RegionTask::true_map() const {
  explain::HeatMap m;
  m.width = m.height = size;
  m.values.resize(size * size);
  for (std::size_t p = 0; p < m.values.size(); ++p) m.values[p] = inside(p) ? 1.0 : 0.0;
  return m;
}

explain::HeatMap RegionTask::shuffled(const explain::HeatMap& map, std::uint64_t seed) const {
  explain::HeatMap out = map;
  std::mt19937_64 rng(seed);
  std::shuffle(out.values.begin(), out.values.end(), rng);
  return out;
}

Real RegionTask::score(const Tensor& image) const {
  const std::size_t hw = size * size;
  auto a = image.data();
  auto b = pixels.data();
  std::size_t kept = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    if (!inside(p)) continue;
    bool same = true;
    for (std::size_t c = 0; c < 3; ++c) same = same && a[c * hw + p] == b[c * hw + p];
    kept += same;
  }
  return static_cast<Real>(kept) / static_cast<Real>(region_pixels());
}

}  // namespace geclip::testing
