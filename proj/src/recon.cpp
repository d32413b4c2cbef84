#include "hompix/recon.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

#include "hompix/error.hpp"

namespace hompix {

namespace {

constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
constexpr std::size_t kSmallInput = 64;

bool adjacent(const PixelHit& a, const PixelHit& b) {
  return std::abs(int{a.x} - int{b.x}) <= 1 && std::abs(int{a.y} - int{b.y}) <= 1;
}

void check_input(std::span<const PixelHit> hits, const ClusterParams& params) {
  if (hits.size() >= kNone) throw ContractViolation("cluster: too many hits for one call");
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i].x >= params.grid_size || hits[i].y >= params.grid_size)
      throw ContractViolation("cluster: hit " + std::to_string(i) + " lies outside the pixel grid");
    if (i > 0 && stream_less(hits[i], hits[i - 1]))
      throw ContractViolation("cluster: hits are not stream-ordered at index " + std::to_string(i));
  }
}

// Union-find whose roots are always the smallest index of their component.
struct MinRootForest {
  std::vector<std::uint32_t> parent;

  explicit MinRootForest(std::size_t n) : parent(n) {
    for (std::size_t i = 0; i < n; ++i) parent[i] = static_cast<std::uint32_t>(i);
  }

  std::uint32_t find(std::uint32_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  }

  void link(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent[b] = a;
    else parent[a] = b;
  }
};

// Links every hit in [begin, end) to the latest earlier hit of [begin, i) on
// each neighbouring pixel that lies within the window. `last` must hold kNone
// for every pixel on entry and is restored on exit.
void scan_range(std::span<const PixelHit> hits, std::size_t begin, std::size_t end,
                const ClusterParams& params, MinRootForest& forest,
                std::vector<std::uint32_t>& last) {
  const int g = params.grid_size;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& h = hits[i];
    const int x = h.x, y = h.y;
    for (int dy = -1; dy <= 1; ++dy) {
      const int ny = y + dy;
      if (ny < 0 || ny >= g) continue;
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx;
        if (nx < 0 || nx >= g) continue;
        const std::uint32_t j = last[static_cast<std::size_t>(ny) * g + nx];
        if (j != kNone && h.toa - hits[j].toa <= params.window_ticks)
          forest.link(static_cast<std::uint32_t>(i), j);
      }
    }
    last[static_cast<std::size_t>(y) * g + x] = static_cast<std::uint32_t>(i);
  }
  for (std::size_t i = begin; i < end; ++i)
    last[static_cast<std::size_t>(hits[i].y) * g + hits[i].x] = kNone;
}

std::vector<std::uint32_t> finish_labels(MinRootForest& forest) {
  std::vector<std::uint32_t> labels(forest.parent.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = forest.find(static_cast<std::uint32_t>(i));
  return labels;
}

Cluster make_cluster(std::vector<PixelHit>&& hits) {
  Cluster c;
  c.hits = std::move(hits);
  c.x_min = c.x_max = c.hits.front().x;
  c.y_min = c.y_max = c.hits.front().y;
  c.toa_min = c.toa_max = c.hits.front().toa;
  for (const auto& h : c.hits) {
    c.x_min = std::min(c.x_min, h.x);
    c.x_max = std::max(c.x_max, h.x);
    c.y_min = std::min(c.y_min, h.y);
    c.y_max = std::max(c.y_max, h.y);
    c.toa_min = std::min(c.toa_min, h.toa);
    c.toa_max = std::max(c.toa_max, h.toa);
  }
  return c;
}

}  // namespace

std::vector<std::uint32_t> cluster_labels(std::span<const PixelHit> hits,
                                          const ClusterParams& params) {
  check_input(hits, params);
  MinRootForest forest(hits.size());
  if (hits.size() <= kSmallInput) {
    // Direct pairwise test; avoids touching the per-pixel table.
    for (std::size_t i = 1; i < hits.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (adjacent(hits[i], hits[j]) && hits[i].toa - hits[j].toa <= params.window_ticks)
          forest.link(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    return finish_labels(forest);
  }
  std::vector<std::uint32_t> last(static_cast<std::size_t>(params.grid_size) * params.grid_size, kNone);
  scan_range(hits, 0, hits.size(), params, forest, last);
  return finish_labels(forest);
}

std::vector<std::uint32_t> cluster_labels_parallel(std::span<const PixelHit> hits, unsigned chunks,
                                                   const ClusterParams& params) {
  check_input(hits, params);
  const std::size_t n = hits.size();
  chunks = std::max(1u, std::min<unsigned>(chunks, static_cast<unsigned>(std::max<std::size_t>(1, n))));
  MinRootForest forest(n);
  std::vector<std::size_t> bounds(chunks + 1);
  for (unsigned k = 0; k <= chunks; ++k) bounds[k] = n * k / chunks;

  const std::size_t pixels = static_cast<std::size_t>(params.grid_size) * params.grid_size;
  {
    // Chunks touch disjoint parent ranges, so they can run concurrently.
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < chunks; ++k)
      pool.emplace_back([&, k] {
        std::vector<std::uint32_t> last(pixels, kNone);
        scan_range(hits, bounds[k], bounds[k + 1], params, forest, last);
      });
    for (auto& t : pool) t.join();
  }

  // Any link across boundary b joins a hit no earlier than toa[b] - window to
  // a hit no later than toa[b-1] + window; rescanning that span finds it.
  std::vector<std::uint32_t> last(pixels, kNone);
  for (unsigned k = 1; k < chunks; ++k) {
    const std::size_t b = bounds[k];
    if (b == 0 || b >= n) continue;
    const std::uint64_t lo_toa = hits[b].toa >= params.window_ticks ? hits[b].toa - params.window_ticks : 0;
    const std::uint64_t hi_toa = hits[b - 1].toa + params.window_ticks;
    const auto lo = std::partition_point(hits.begin(), hits.end(),
                                         [&](const PixelHit& h) { return h.toa < lo_toa; });
    const auto hi = std::partition_point(hits.begin(), hits.end(),
                                         [&](const PixelHit& h) { return h.toa <= hi_toa; });
    scan_range(hits, static_cast<std::size_t>(lo - hits.begin()),
               static_cast<std::size_t>(hi - hits.begin()), params, forest, last);
  }
  return finish_labels(forest);
}

std::vector<Cluster> gather_clusters(std::span<const PixelHit> hits,
                                     std::span<const std::uint32_t> labels) {
  if (labels.size() != hits.size()) throw ContractViolation("gather_clusters: size mismatch");
  std::vector<std::uint32_t> slot(hits.size(), kNone);
  std::vector<std::vector<PixelHit>> groups;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto root = labels[i];
    if (root > i) throw ContractViolation("gather_clusters: label after its member");
    if (root == i) {
      slot[i] = static_cast<std::uint32_t>(groups.size());
      groups.emplace_back();
    }
    groups[slot[root]].push_back(hits[i]);
  }
  std::vector<Cluster> clusters;
  clusters.reserve(groups.size());
  for (auto& g : groups) clusters.push_back(make_cluster(std::move(g)));
  return clusters;
}

std::vector<Cluster> cluster_stream(std::span<const PixelHit> hits, const ClusterParams& params) {
  if (std::is_sorted(hits.begin(), hits.end(), stream_less))
    return gather_clusters(hits, cluster_labels(hits, params));
  std::vector<PixelHit> sorted(hits.begin(), hits.end());
  std::stable_sort(sorted.begin(), sorted.end(), stream_less);
  return gather_clusters(sorted, cluster_labels(sorted, params));
}

// --- StreamClusterer -------------------------------------------------------

StreamClusterer::StreamClusterer(const ClusterParams& params, Callback on_cluster)
    : params_(params),
      on_cluster_(std::move(on_cluster)),
      pixel_last_(static_cast<std::size_t>(params.grid_size) * params.grid_size, 0) {}

std::uint32_t StreamClusterer::find(std::uint32_t i) {
  while (parent_[i] != i) {
    parent_[i] = parent_[parent_[i]];
    i = parent_[i];
  }
  return i;
}

void StreamClusterer::link(std::uint32_t a, std::uint32_t b) {
  a = find(a);
  b = find(b);
  if (a == b) return;
  if (b < a) std::swap(a, b);
  parent_[b] = a;
  next_[tail_[a]] = b;
  tail_[a] = tail_[b];
  last_toa_[a] = std::max(last_toa_[a], last_toa_[b]);
}

void StreamClusterer::push(std::span<const PixelHit> hits) {
  const int g = params_.grid_size;
  for (const auto& h : hits) {
    if (h.x >= g || h.y >= g) throw ContractViolation("StreamClusterer: hit outside the pixel grid");
    if (have_last_ && stream_less(h, last_))
      throw ContractViolation("StreamClusterer: hits are not stream-ordered");
    have_last_ = true;
    last_ = h;
    if (buffer_.size() >= kNone - 1) throw ContractViolation("StreamClusterer: window too large");

    const auto i = static_cast<std::uint32_t>(buffer_.size());
    buffer_.push_back(h);
    parent_.push_back(i);
    next_.push_back(kNone);
    tail_.push_back(i);
    last_toa_.push_back(h.toa);
    emitted_.push_back(0);

    for (int dy = -1; dy <= 1; ++dy) {
      const int ny = h.y + dy;
      if (ny < 0 || ny >= g) continue;
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = h.x + dx;
        if (nx < 0 || nx >= g) continue;
        const std::uint64_t q = pixel_last_[static_cast<std::size_t>(ny) * g + nx];
        if (q == 0 || q - 1 < base_) continue;
        const auto j = static_cast<std::uint32_t>(q - 1 - base_);
        if (emitted_[j] || h.toa - buffer_[j].toa > params_.window_ticks) continue;
        link(i, j);
      }
    }
    pixel_last_[static_cast<std::size_t>(h.y) * g + h.x] = base_ + i + 1;
    ++seen_;
    emit_ready(h.toa, false);
  }
  if (front_ > 65536 && front_ * 2 > buffer_.size()) compact();
}

void StreamClusterer::flush() {
  emit_ready(0, true);
  compact();
}

void StreamClusterer::emit_ready(std::uint64_t head_toa, bool all) {
  std::vector<std::uint32_t> members;
  while (front_ < buffer_.size()) {
    if (emitted_[front_]) {
      ++front_;
      continue;
    }
    const auto root = find(static_cast<std::uint32_t>(front_));
    if (!all && head_toa - last_toa_[root] <= params_.window_ticks) break;
    members.clear();
    for (auto k = root; k != kNone; k = next_[k]) members.push_back(k);
    std::sort(members.begin(), members.end());
    std::vector<PixelHit> hits;
    hits.reserve(members.size());
    for (auto k : members) {
      hits.push_back(buffer_[k]);
      emitted_[k] = 1;
    }
    on_cluster_(make_cluster(std::move(hits)));
    ++front_;
  }
}

void StreamClusterer::compact() {
  const auto shift = static_cast<std::uint32_t>(front_);
  if (shift == 0) return;
  auto drop = [shift](auto& v) { v.erase(v.begin(), v.begin() + shift); };
  drop(buffer_);
  drop(parent_);
  drop(next_);
  drop(tail_);
  drop(last_toa_);
  drop(emitted_);
  for (std::size_t k = 0; k < buffer_.size(); ++k) {
    const auto local = static_cast<std::uint32_t>(k);
    if (emitted_[k]) {
      parent_[k] = local;
      next_[k] = kNone;
      tail_[k] = local;
      continue;
    }
    parent_[k] -= shift;
    if (next_[k] != kNone) next_[k] -= shift;
    tail_[k] -= shift;
  }
  base_ += shift;
  front_ = 0;
}

// --- Photons ---------------------------------------------------------------

const char* to_string(RegionTag tag) {
  switch (tag) {
    case RegionTag::outside: return "outside";
    case RegionTag::fiber1: return "fiber1";
    case RegionTag::fiber2: return "fiber2";
  }
  return "unknown";
}

const char* to_string(PairKind kind) {
  switch (kind) {
    case PairKind::cross: return "cross";
    case PairKind::same_fiber1: return "fiber1";
    case PairKind::same_fiber2: return "fiber2";
  }
  return "unknown";
}

double timewalk_correct(double t_raw_ns, std::uint32_t tot_ticks, const TimewalkParams& params,
                        double tot_lsb_ns) {
  if (params.w0_ns2 == 0.0) return t_raw_ns;
  return t_raw_ns - params.w0_ns2 / (static_cast<double>(tot_ticks) * tot_lsb_ns + params.w1_ns);
}

Photon centroid(const Cluster& cluster, const CentroidParams& params) {
  if (cluster.hits.empty()) throw ContractViolation("centroid: empty cluster");
  Photon p;
  double sw = 0.0, sx = 0.0, sy = 0.0;
  const PixelHit* brightest = &cluster.hits.front();
  for (const auto& h : cluster.hits) {
    sw += h.tot;
    sx += static_cast<double>(h.x) * h.tot;
    sy += static_cast<double>(h.y) * h.tot;
    if (h.tot > brightest->tot ||
        (h.tot == brightest->tot && std::tie(h.x, h.y) < std::tie(brightest->x, brightest->y)))
      brightest = &h;
  }
  if (sw > 0.0) {
    p.x = sx / sw;
    p.y = sy / sw;
  } else {
    for (const auto& h : cluster.hits) {
      p.x += h.x;
      p.y += h.y;
    }
    p.x /= static_cast<double>(cluster.hits.size());
    p.y /= static_cast<double>(cluster.hits.size());
    p.unweighted = true;
  }
  p.tot_max = brightest->tot;
  p.n_pixels = static_cast<std::uint32_t>(cluster.hits.size());
  p.t_raw_ns = static_cast<double>(brightest->toa) * params.toa_lsb_ns;
  p.t_ns = timewalk_correct(p.t_raw_ns, brightest->tot, params.walk, params.tot_lsb_ns);
  return p;
}

RegionTag assign_region(const Photon& photon, const std::array<Region, 2>& regions) {
  const double d = std::hypot(regions[0].x - regions[1].x, regions[0].y - regions[1].y);
  if (!(d > regions[0].radius + regions[1].radius))
    throw ConfigError({"analysis.regions: fiber regions must not overlap"});
  if (regions[0].contains(photon.x, photon.y)) return RegionTag::fiber1;
  if (regions[1].contains(photon.x, photon.y)) return RegionTag::fiber2;
  return RegionTag::outside;
}

TimewalkCalibration calibrate_timewalk(std::span<const double> t_raw_ns,
                                       std::span<const std::uint32_t> tot_ticks,
                                       std::span<const double> t_ref_ns, double tot_lsb_ns) {
  const std::size_t n = t_raw_ns.size();
  if (tot_ticks.size() != n || t_ref_ns.size() != n || n < 3)
    throw ContractViolation("calibrate_timewalk: need >= 3 matched samples");

  // For fixed w1 the model is linear in (w0, offset).
  auto solve = [&](double w1, TimewalkCalibration& out) {
    double s_uu = 0, s_u = 0, s_1 = 0, s_uy = 0, s_y = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = 1.0 / (tot_ticks[i] * tot_lsb_ns + w1);
      const double y = t_raw_ns[i] - t_ref_ns[i];
      s_uu += u * u;
      s_u += u;
      s_1 += 1.0;
      s_uy += u * y;
      s_y += y;
    }
    const double det = s_uu * s_1 - s_u * s_u;
    if (std::abs(det) < 1e-300) return std::numeric_limits<double>::infinity();
    const double w0 = (s_uy * s_1 - s_u * s_y) / det;
    const double c = (s_uu * s_y - s_u * s_uy) / det;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = t_raw_ns[i] - t_ref_ns[i] - w0 / (tot_ticks[i] * tot_lsb_ns + w1) - c;
      ss += r * r;
    }
    out.params = {w0, w1};
    out.offset_ns = c;
    out.residual_rms_ns = std::sqrt(ss / static_cast<double>(n));
    return ss;
  };

  TimewalkCalibration best, trial;
  double best_ss = std::numeric_limits<double>::infinity();
  double best_log = 0.0;
  for (double lw = std::log(0.1); lw <= std::log(1000.0); lw += 0.05) {
    const double ss = solve(std::exp(lw), trial);
    if (ss < best_ss) {
      best_ss = ss;
      best = trial;
      best_log = lw;
    }
  }
  // Golden-section refinement in log(w1).
  double a = best_log - 0.05, b = best_log + 0.05;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 60; ++it) {
    const double c = b - phi * (b - a), d = a + phi * (b - a);
    if (solve(std::exp(c), trial) < solve(std::exp(d), trial)) b = d;
    else a = c;
  }
  if (solve(std::exp(0.5 * (a + b)), trial) < best_ss) best = trial;
  return best;
}

CrossMatchResult find_cross_coincidences(std::span<const double> t1_ns,
                                         std::span<const double> t2_ns, double window_ns) {
  CrossMatchResult out;
  if (t2_ns.empty()) return out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < t1_ns.size(); ++i) {
    const double t = t1_ns[i];
    while (j < t2_ns.size() && t2_ns[j] < t) ++j;
    std::size_t best;
    if (j == 0) best = 0;
    else if (j == t2_ns.size()) best = j - 1;
    else best = (t2_ns[j] - t < t - t2_ns[j - 1]) ? j : j - 1;
    const double dt = t - t2_ns[best];
    if (std::abs(dt) <= window_ns)
      out.pairs.push_back({PairKind::cross, dt, static_cast<std::uint32_t>(i),
                           static_cast<std::uint32_t>(best)});
    else
      ++out.out_of_window;
  }
  return out;
}

std::vector<CoincidencePair> find_same_fiber_pairs(std::span<const double> t_ns, double window_ns,
                                                   PairKind kind) {
  std::vector<CoincidencePair> out;
  for (std::size_t i = 0; i + 1 < t_ns.size(); ++i) {
    const double dt = t_ns[i + 1] - t_ns[i];
    if (dt <= window_ns)
      out.push_back({kind, dt, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i + 1)});
  }
  return out;
}

double pair_separation(const Photon& a, const Photon& b) { return std::hypot(a.x - b.x, a.y - b.y); }

RegionPhotons split_by_region(std::span<const Photon> photons) {
  RegionPhotons out;
  for (const auto& p : photons) {
    if (p.region == RegionTag::fiber1) out.fiber1.push_back(p);
    else if (p.region == RegionTag::fiber2) out.fiber2.push_back(p);
    else ++out.outside;
  }
  auto by_time = [](const Photon& a, const Photon& b) { return a.t_ns < b.t_ns; };
  std::stable_sort(out.fiber1.begin(), out.fiber1.end(), by_time);
  std::stable_sort(out.fiber2.begin(), out.fiber2.end(), by_time);
  return out;
}

std::vector<double> photon_times(std::span<const Photon> photons) {
  std::vector<double> t;
  t.reserve(photons.size());
  for (const auto& p : photons) t.push_back(p.t_ns);
  return t;
}

}  // namespace hompix
