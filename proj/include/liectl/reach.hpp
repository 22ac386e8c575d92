#pragma once

#include "liectl/linsys.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

namespace liectl {

/// Sampling parameters. Every run is reproducible from these plus the system.
struct ReachParams {
  double t_max = 8.0;
  std::size_t budget = 20000;  // samples per direction
  std::uint64_t seed = 1;
  double step = 0.02;
  double dwell_min = 0.05;
  double dwell_max = 0.5;
  double vertex_prob = 0.5;
  double root_prob = 0.25;      // chance a sample starts in F rather than at an earlier point
  double epsilon = 0.02;        // sup-norm tolerance for reaching F
  double escape_margin = 0.5;   // stop samples beyond the window widened by this fraction per side
  std::vector<std::pair<double, double>> window;  // per non-lattice coordinate; empty = no escape box
  unsigned threads = 0;         // 0 = hardware concurrency
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (master, stream, index).
inline std::uint64_t sub_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(master ^ splitmix64(stream)) + index);
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. fn must only touch slot i.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------------------------
// Grids

struct GridAxis {
  std::size_t coord = 0;  // state coordinate
  bool circle = false;
  double lo = 0.0;
  double hi = 1.0;
  std::size_t count = 1;

  double width() const { return circle ? 1.0 / double(count) : (count > 1 ? (hi - lo) / double(count - 1) : 1.0); }
  double center(std::size_t i) const { return circle ? (double(i) + 0.5) / double(count) : lo + double(i) * width(); }
  /// Cell containing v, or -1 outside the window.
  long index(double v) const {
    if (circle) {
      const double w = v - std::floor(v);
      return std::min(static_cast<long>(w * double(count)), static_cast<long>(count) - 1);
    }
    const double r = std::round((v - lo) / width());
    if (!(r >= 0.0) || r > double(count - 1)) return -1;
    return static_cast<long>(r);
  }
};

enum class CellClass : std::uint8_t { Unknown = 0, Out = 1, In = 2 };

inline const char* to_string(CellClass c) {
  switch (c) {
    case CellClass::In: return "in";
    case CellClass::Out: return "out";
    default: return "unknown";
  }
}

/// Regular grid over some state coordinates; cells are centred on the grid points
/// (linear axes) or are equal bins (circle axes).
class Grid {
 public:
  Grid() = default;
  explicit Grid(std::vector<GridAxis> axes) : axes_(std::move(axes)) {
    std::size_t s = 1;
    for (const auto& a : axes_) {
      strides_.push_back(s);
      s *= a.count;
    }
    size_ = s;
    cells.assign(size_, CellClass::Unknown);
  }

  const std::vector<GridAxis>& axes() const { return axes_; }
  std::size_t size() const { return size_; }

  std::optional<std::size_t> cell_of(const double* x) const {
    std::size_t flat = 0;
    for (std::size_t a = 0; a < axes_.size(); ++a) {
      const long i = axes_[a].index(x[axes_[a].coord]);
      if (i < 0) return std::nullopt;
      flat += static_cast<std::size_t>(i) * strides_[a];
    }
    return flat;
  }

  std::vector<std::size_t> multi(std::size_t flat) const {
    std::vector<std::size_t> m(axes_.size());
    for (std::size_t a = 0; a < axes_.size(); ++a) m[a] = (flat / strides_[a]) % axes_[a].count;
    return m;
  }

  std::size_t flat(const std::vector<std::size_t>& m) const {
    std::size_t f = 0;
    for (std::size_t a = 0; a < axes_.size(); ++a) f += m[a] * strides_[a];
    return f;
  }

  /// Cell centre, one value per axis.
  Vector center(std::size_t flat_index) const {
    const auto m = multi(flat_index);
    Vector c(static_cast<Eigen::Index>(axes_.size()));
    for (std::size_t a = 0; a < axes_.size(); ++a) c(static_cast<Eigen::Index>(a)) = axes_[a].center(m[a]);
    return c;
  }

  std::size_t count(CellClass c) const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), c)); }

  /// Marks every cell within `radius` cells (Chebyshev) of an In cell; circle axes wrap.
  std::vector<bool> dilated_in(std::size_t radius) const {
    std::vector<bool> out(size_, false);
    std::vector<bool> cur(size_);
    for (std::size_t i = 0; i < size_; ++i) cur[i] = cells[i] == CellClass::In;
    for (std::size_t a = 0; a < axes_.size(); ++a) {
      std::fill(out.begin(), out.end(), false);
      const auto& ax = axes_[a];
      for (std::size_t f = 0; f < size_; ++f) {
        if (!cur[f]) continue;
        const std::size_t i = (f / strides_[a]) % ax.count;
        const std::size_t base = f - i * strides_[a];
        for (long d = -static_cast<long>(radius); d <= static_cast<long>(radius); ++d) {
          long j = static_cast<long>(i) + d;
          if (ax.circle) {
            j = ((j % static_cast<long>(ax.count)) + static_cast<long>(ax.count)) % static_cast<long>(ax.count);
          } else if (j < 0 || j >= static_cast<long>(ax.count)) {
            continue;
          }
          out[base + static_cast<std::size_t>(j) * strides_[a]] = true;
        }
      }
      cur = out;
    }
    return cur;
  }

  std::vector<CellClass> cells;

 private:
  std::vector<GridAxis> axes_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
};

inline constexpr std::size_t kGridPoints = 101;
inline constexpr std::size_t kCircleBins = 64;

/// Grid over every coordinate: `window` gives the range of each non-lattice coordinate in order.
inline Grid make_grid(const NilGroup& g, const std::vector<std::pair<double, double>>& window,
                      std::size_t points = kGridPoints, std::size_t circle_bins = kCircleBins) {
  std::vector<GridAxis> axes;
  std::size_t w = 0;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    GridAxis a;
    a.coord = i;
    if (g.is_lattice(i)) {
      a.circle = true;
      a.count = circle_bins;
    } else {
      if (w >= window.size()) throw InputError("grid window needs a range for every non-lattice coordinate");
      a.lo = window[w].first;
      a.hi = window[w].second;
      if (!(a.lo < a.hi) || points < 2) throw InputError("grid window range must be increasing with >= 2 points");
      a.count = points;
      ++w;
    }
    axes.push_back(a);
  }
  if (w != window.size()) throw InputError("grid window has more ranges than non-lattice coordinates");
  return Grid(std::move(axes));
}

/// Product of intervals over the linear grid axes (circle axes are always inside).
struct BoxTarget {
  std::vector<std::pair<double, double>> bounds;  // one per linear grid axis, in axis order
};

struct Agreement {
  double fraction = 0.0;
  std::size_t considered = 0;
  std::size_t agreeing = 0;
  std::size_t excluded = 0;
};

/// Fraction of cells whose In/not-In class matches membership of the centre in the target,
/// ignoring cells whose centre lies within `delta` of the target boundary.
inline Agreement grid_agreement(const Grid& grid, const BoxTarget& target, double delta) {
  Agreement out;
  std::vector<std::size_t> linear;
  for (std::size_t a = 0; a < grid.axes().size(); ++a) {
    if (!grid.axes()[a].circle) linear.push_back(a);
  }
  if (linear.size() != target.bounds.size()) throw InputError("target needs one interval per linear grid axis");
  for (std::size_t f = 0; f < grid.size(); ++f) {
    const Vector c = grid.center(f);
    bool inside = true;
    double inner = std::numeric_limits<double>::infinity();
    double outer2 = 0.0;
    for (std::size_t k = 0; k < linear.size(); ++k) {
      const double v = c(static_cast<Eigen::Index>(linear[k]));
      const auto [lo, hi] = target.bounds[k];
      if (v <= lo || v >= hi) inside = false;
      inner = std::min(inner, std::min(v - lo, hi - v));
      const double ex = std::max({lo - v, v - hi, 0.0});
      outer2 += ex * ex;
    }
    const double dist = inside ? inner : std::sqrt(outer2);
    if (dist <= delta) {
      ++out.excluded;
      continue;
    }
    ++out.considered;
    if ((grid.cells[f] == CellClass::In) == inside) ++out.agreeing;
  }
  out.fraction = out.considered ? double(out.agreeing) / double(out.considered) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------------------------
// Metric and spatial hashing on a subset of coordinates

struct Metric {
  std::vector<std::size_t> axes;
  std::vector<bool> circle;

  double distance(const double* a, const double* b) const {
    double d = 0.0;
    for (std::size_t k = 0; k < axes.size(); ++k) {
      double diff = std::abs(a[axes[k]] - b[axes[k]]);
      if (circle[k]) {
        diff = std::fmod(diff, 1.0);
        diff = std::min(diff, 1.0 - diff);
      }
      d = std::max(d, diff);
    }
    return d;
  }
};

class CellHash {
 public:
  CellHash() = default;
  CellHash(Metric metric, double cell) : metric_(std::move(metric)), cell_(cell) {
    for (std::size_t k = 0; k < metric_.axes.size(); ++k) {
      wrap_.push_back(metric_.circle[k] ? std::max<long>(1, static_cast<long>(std::floor(1.0 / cell))) : 0);
    }
  }

  const Metric& metric() const { return metric_; }

  std::uint64_t key(const double* x) const {
    std::uint64_t h = 0x12345678ULL;
    for (std::size_t k = 0; k < metric_.axes.size(); ++k) h = mix(h, coord(k, x[metric_.axes[k]]));
    return h;
  }

  /// Keys of the 3^d cells around x (deduplicated).
  void keys_near(const double* x, std::vector<std::uint64_t>& out) const {
    out.clear();
    const std::size_t d = metric_.axes.size();
    std::vector<long> base(d);
    for (std::size_t k = 0; k < d; ++k) base[k] = coord(k, x[metric_.axes[k]]);
    std::size_t combos = 1;
    for (std::size_t k = 0; k < d; ++k) combos *= 3;
    for (std::size_t c = 0; c < combos; ++c) {
      std::size_t r = c;
      std::uint64_t h = 0x12345678ULL;
      for (std::size_t k = 0; k < d; ++k) {
        long v = base[k] + static_cast<long>(r % 3) - 1;
        r /= 3;
        if (wrap_[k] > 0) v = ((v % wrap_[k]) + wrap_[k]) % wrap_[k];
        h = mix(h, v);
      }
      out.push_back(h);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }

 private:
  long coord(std::size_t k, double v) const {
    if (wrap_[k] > 0) {
      const double w = v - std::floor(v);
      return std::min(static_cast<long>(w * double(wrap_[k])), wrap_[k] - 1);
    }
    return static_cast<long>(std::floor(v / cell_));
  }
  static std::uint64_t mix(std::uint64_t h, long v) { return splitmix64(h ^ static_cast<std::uint64_t>(v)); }

  Metric metric_;
  double cell_ = 1.0;
  std::vector<long> wrap_;
};

// ---------------------------------------------------------------------------------------------
// Sampling trees

struct EscapeBox {
  std::vector<std::size_t> axes;
  std::vector<double> lo, hi;

  bool outside(const double* x) const {
    for (std::size_t k = 0; k < axes.size(); ++k) {
      if (x[axes[k]] < lo[k] || x[axes[k]] > hi[k]) return true;
    }
    return false;
  }
};

struct SampleRecord {
  int parent = -1;            // sample index; -1 when starting at a root
  std::uint32_t root = 0;     // root index (of the whole chain)
  std::uint32_t branch = 0;   // node (local index) of the parent this sample starts from
  double start_time = 0.0;    // chain time at node 0
  ControlLaw law;             // law actually simulated (cut at escape)
  std::uint32_t first = 0;    // global index of node 0
  std::uint32_t count = 0;    // number of nodes, including node 0
};

/// Random piecewise-constant laws grown into a tree: each sample starts at a root (a point of F)
/// or at a recorded point of an earlier round, and runs in the tree's time direction for the
/// rest of the horizon. Rounds are fixed-size, so budget B yields a prefix of budget B' > B.
class SampleTree {
 public:
  SampleTree(const LinearSystem& sys, Direction dir, std::vector<Vector> roots, CellHash explore, EscapeBox escape,
             const ReachParams& params, std::uint64_t stream)
      : sys_(&sys), dir_(dir), roots_(std::move(roots)), explore_(std::move(explore)), escape_(std::move(escape)),
        p_(params), stream_(stream) {
    if (roots_.empty()) throw InputError("sampling needs at least one start point");
    for (auto& r : roots_) r = sys.group().reduce(r).coords;
  }

  void grow(std::size_t budget) {
    std::size_t round = 0;
    while (samples_.size() < budget) {
      const std::size_t size = std::min<std::size_t>(std::min<std::size_t>(64U << std::min<std::size_t>(round, 5), 2048),
                                                     budget - samples_.size());
      const std::size_t base = samples_.size();
      std::vector<Out> outs(size);
      parallel_for(size, p_.threads, [&](std::size_t i) { outs[i] = make_sample(base + i); });
      for (auto& o : outs) absorb(std::move(o));
      ++round;
    }
  }

  /// Replays one explicit law from a root (no randomness), appended as a sample.
  void add_law(std::uint32_t root, const ControlLaw& law) {
    Out o;
    o.rec.root = root;
    o.rec.law = law;
    simulate_into(roots_[root], law, o);
    absorb(std::move(o));
  }

  Direction direction() const { return dir_; }
  const LinearSystem& system() const { return *sys_; }
  const std::vector<Vector>& roots() const { return roots_; }
  const std::vector<SampleRecord>& samples() const { return samples_; }
  std::size_t node_count() const { return owner_.size(); }
  std::size_t n() const { return static_cast<std::size_t>(sys_->n()); }
  const double* node(std::size_t i) const { return coords_.data() + i * n(); }
  Vector node_vector(std::size_t i) const { return Eigen::Map<const Vector>(node(i), sys_->n()); }
  std::uint32_t owner(std::size_t i) const { return owner_[i]; }
  double local_time(std::size_t i) const { return times_[i]; }
  double chain_time(std::size_t i) const { return samples_[owner_[i]].start_time + times_[i]; }
  const CellHash& explore_hash() const { return explore_; }

  /// Law (in this tree's time direction) leading from the chain's root to node i.
  ControlLaw chain_law(std::size_t i) const {
    std::vector<std::pair<std::uint32_t, double>> parts;
    std::uint32_t s = owner_[i];
    double t = times_[i];
    while (true) {
      parts.emplace_back(s, t);
      const auto& rec = samples_[s];
      if (rec.parent < 0) break;
      const auto& par = samples_[static_cast<std::size_t>(rec.parent)];
      t = times_[par.first + rec.branch];
      s = static_cast<std::uint32_t>(rec.parent);
    }
    ControlLaw law;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      if (it->second > 0.0) law.append(samples_[it->first].law.truncated(it->second));
    }
    return law;
  }

  std::uint32_t root_of(std::size_t i) const { return samples_[owner_[i]].root; }

  /// Global node ids along the chain from its root to node i, in time order (root excluded).
  std::vector<std::uint32_t> chain_nodes(std::size_t i) const {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> spans;  // (sample, last local node)
    std::uint32_t s = owner_[i];
    std::uint32_t last = static_cast<std::uint32_t>(i) - samples_[s].first;
    while (true) {
      spans.emplace_back(s, last);
      const auto& rec = samples_[s];
      if (rec.parent < 0) break;
      last = rec.branch;
      s = static_cast<std::uint32_t>(rec.parent);
    }
    std::vector<std::uint32_t> out;
    for (auto it = spans.rbegin(); it != spans.rend(); ++it) {
      for (std::uint32_t k = 1; k <= it->second; ++k) out.push_back(samples_[it->first].first + k);
    }
    return out;
  }

 private:
  struct Out {
    SampleRecord rec;
    std::vector<double> coords;
    std::vector<double> times;
  };

  void simulate_into(const Vector& start, const ControlLaw& law, Out& o) const {
    const auto nn = n();
    FieldKernel kernel(*sys_, dir_);
    Vector x = start;
    o.coords.assign(x.data(), x.data() + nn);
    o.times.push_back(0.0);
    double t0 = 0.0;
    std::vector<Piece> kept;
    for (const auto& piece : law.pieces()) {
      const Vector z = sys_->control_vector(piece.value);
      const std::size_t ns = substeps(piece.duration, p_.step, 1);
      const double h = piece.duration / double(ns);
      bool escaped = false;
      std::size_t s = 1;
      for (; s <= ns; ++s) {
        kernel.rk4_step(x.data(), z.data(), h);
        o.coords.insert(o.coords.end(), x.data(), x.data() + nn);
        o.times.push_back(s == ns ? t0 + piece.duration : t0 + double(s) * h);
        if (escape_.outside(x.data())) {
          escaped = true;
          break;
        }
      }
      if (escaped) {
        if (s == ns) {
          kept.push_back(piece);
        } else {
          kept.push_back({double(s) * h, piece.value});
          o.times.back() = t0 + double(s) * h;
        }
        o.rec.law = ControlLaw(std::move(kept));
        return;
      }
      kept.push_back(piece);
      t0 += piece.duration;
    }
    o.rec.law = ControlLaw(std::move(kept));
  }

  Out make_sample(std::size_t index) const {
    std::mt19937_64 rng(sub_seed(p_.seed, stream_, index));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Out o;
    Vector start;
    bool from_root = explore_cells_.empty() || unit(rng) < p_.root_prob;
    if (!from_root) {
      const auto& cell = explore_cells_[std::uniform_int_distribution<std::size_t>(0, explore_cells_.size() - 1)(rng)];
      const std::uint32_t node_id = cell[std::uniform_int_distribution<std::size_t>(0, cell.size() - 1)(rng)];
      const double t = chain_time(node_id);
      if (t < p_.t_max - p_.dwell_min) {
        o.rec.parent = static_cast<int>(owner_[node_id]);
        o.rec.branch = node_id - samples_[owner_[node_id]].first;
        o.rec.start_time = t;
        o.rec.root = samples_[owner_[node_id]].root;
        start = node_vector(node_id);
      } else {
        from_root = true;
      }
    }
    if (from_root) {
      o.rec.root = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, roots_.size() - 1)(rng));
      start = roots_[o.rec.root];
    }
    const double horizon = p_.t_max - o.rec.start_time;
    std::uniform_real_distribution<double> dwell(p_.dwell_min, p_.dwell_max);
    const auto& box = sys_->omega();
    std::vector<Piece> pieces;
    double t = 0.0;
    while (horizon - t > 1e-12) {
      const double d = std::min(dwell(rng), horizon - t);
      Vector u(static_cast<Eigen::Index>(box.dim()));
      const bool vertex = unit(rng) < p_.vertex_prob;
      for (std::size_t j = 0; j < box.dim(); ++j) {
        const auto [lo, hi] = box.bounds()[j];
        u(static_cast<Eigen::Index>(j)) = vertex ? (unit(rng) < 0.5 ? lo : hi) : lo + (hi - lo) * unit(rng);
      }
      pieces.push_back({d, u});
      t += d;
    }
    simulate_into(start, ControlLaw(std::move(pieces)), o);
    return o;
  }

  void absorb(Out&& o) {
    const auto idx = static_cast<std::uint32_t>(samples_.size());
    o.rec.first = static_cast<std::uint32_t>(owner_.size());
    o.rec.count = static_cast<std::uint32_t>(o.times.size());
    for (std::size_t k = 0; k < o.times.size(); ++k) {
      owner_.push_back(idx);
      times_.push_back(o.times[k]);
    }
    coords_.insert(coords_.end(), o.coords.begin(), o.coords.end());
    for (std::uint32_t k = 1; k < o.rec.count; ++k) {
      const std::uint32_t id = o.rec.first + k;
      if (chain_time_of(o.rec, o.times[k]) >= p_.t_max - p_.dwell_min) continue;
      if (escape_.outside(node(id))) continue;
      const auto key = explore_.key(node(id));
      auto [it, fresh] = explore_index_.try_emplace(key, explore_cells_.size());
      if (fresh) explore_cells_.emplace_back();
      explore_cells_[it->second].push_back(id);
    }
    samples_.push_back(std::move(o.rec));
  }

  static double chain_time_of(const SampleRecord& r, double local) { return r.start_time + local; }

  const LinearSystem* sys_;
  Direction dir_;
  std::vector<Vector> roots_;
  CellHash explore_;
  EscapeBox escape_;
  ReachParams p_;
  std::uint64_t stream_;
  std::vector<SampleRecord> samples_;
  std::vector<double> coords_;
  std::vector<double> times_;
  std::vector<std::uint32_t> owner_;
  std::unordered_map<std::uint64_t, std::size_t> explore_index_;
  std::vector<std::vector<std::uint32_t>> explore_cells_;
};

// ---------------------------------------------------------------------------------------------
// Region estimates

struct Bbox {
  std::vector<std::size_t> axes;  // non-lattice coordinates
  Vector lo, hi;

  bool empty() const { return lo.size() == 0 || (lo.array() > hi.array()).any(); }
  Vector extent() const { return empty() ? Vector::Zero(static_cast<Eigen::Index>(axes.size())) : Vector(hi - lo); }
};

inline Bbox make_bbox(const NilGroup& g, const Matrix& points) {
  Bbox b;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    if (!g.is_lattice(i)) b.axes.push_back(i);
  }
  const auto k = static_cast<Eigen::Index>(b.axes.size());
  b.lo = Vector::Constant(k, std::numeric_limits<double>::infinity());
  b.hi = Vector::Constant(k, -std::numeric_limits<double>::infinity());
  for (Eigen::Index c = 0; c < points.cols(); ++c) {
    for (Eigen::Index a = 0; a < k; ++a) {
      const double v = points(static_cast<Eigen::Index>(b.axes[static_cast<std::size_t>(a)]), c);
      b.lo(a) = std::min(b.lo(a), v);
      b.hi(a) = std::max(b.hi(a), v);
    }
  }
  return b;
}

/// Growable column store of points, cheaper than a vector of Vectors.
class PointBuffer {
 public:
  explicit PointBuffer(std::size_t n) : n_(n) {}
  void push(const double* x) { data_.insert(data_.end(), x, x + n_); }
  std::size_t size() const { return n_ ? data_.size() / n_ : 0; }
  bool empty() const { return data_.empty(); }
  const double* at(std::size_t i) const { return data_.data() + i * n_; }
  Matrix matrix() const {
    return Eigen::Map<const Matrix>(data_.data(), static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(size()));
  }

 private:
  std::size_t n_;
  std::vector<double> data_;
};

/// How a point of a region estimate was obtained.
struct WitnessRef {
  enum Kind : std::uint8_t { Sample, Root, Chain, Steer, Loop } kind = Sample;
  std::uint32_t a = 0;  // Sample/Chain: global node; Steer: forward sample; Loop: loop node; Root: root
  std::uint32_t b = 0;  // Steer: index on the steering path; Loop: translation count k
};

struct PerSetState;

struct RegionEstimate {
  Matrix points;                        // one column per point
  std::vector<WitnessRef> witnesses;    // parallel to the columns of `points`
  std::optional<Grid> grid;
  Bbox bbox;
  ReachParams params;
  std::vector<std::string> diagnostics;
  std::shared_ptr<const PerSetState> state;  // trees and witness laws, for audits

  std::size_t size() const { return static_cast<std::size_t>(points.cols()); }
};

/// Coordinates of g0 when it is spanned by central basis axes killed by D; then the
/// remaining coordinates evolve independently of them ("fiber" reduction).
struct FiberInfo {
  bool active = false;
  std::vector<std::size_t> central_axes;
  std::vector<std::size_t> base_axes;
};

inline FiberInfo fiber_info(const LinearSystem& sys) {
  FiberInfo f;
  const auto& g = sys.group();
  const auto dec = spectral_decompose(g.algebra(), sys.derivation());
  const auto n = sys.n();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (dec.zero.cols() > 0 && linalg::distance_to_span(Vector::Unit(n, j), dec.zero) < 1e-9) {
      f.central_axes.push_back(static_cast<std::size_t>(j));
    }
  }
  bool ok = static_cast<Eigen::Index>(f.central_axes.size()) == dec.zero.cols();
  for (auto j : f.central_axes) {
    ok = ok && g.algebra().is_central(j) && linalg::max_abs(sys.drift().col(static_cast<Eigen::Index>(j))) < 1e-12;
  }
  f.active = ok && !f.central_axes.empty();
  if (!f.active) f.central_axes.clear();
  for (std::size_t j = 0; j < g.dim(); ++j) {
    if (std::find(f.central_axes.begin(), f.central_axes.end(), j) == f.central_axes.end()) f.base_axes.push_back(j);
  }
  return f;
}

/// G0 compact: g0 lies in the span of the lattice axes (so G0 is a torus, or trivial).
inline bool g0_compact(const LinearSystem& sys) {
  const auto dec = spectral_decompose(sys.group().algebra(), sys.derivation());
  const auto n = sys.n();
  Matrix lat(n, 0);
  for (auto j : sys.group().lattice()) lat = linalg::hcat(lat, Vector::Unit(n, static_cast<Eigen::Index>(j)));
  for (Eigen::Index c = 0; c < dec.zero.cols(); ++c) {
    if (lat.cols() == 0 || linalg::distance_to_span(dec.zero.col(c), lat) > 1e-9) return false;
  }
  return true;
}

enum class FKind { Identity, CentralSubgroup, PointList };

struct PerSetQuery {
  FKind kind = FKind::Identity;
  double epsilon = 0.02;
  std::vector<Vector> points;  // PointList only
};

namespace detail {

inline Metric metric_on(const NilGroup& g, const std::vector<std::size_t>& axes) {
  Metric m;
  m.axes = axes;
  for (auto a : axes) m.circle.push_back(g.is_lattice(a));
  return m;
}

inline EscapeBox escape_box(const NilGroup& g, const ReachParams& p, const std::vector<std::size_t>& allowed) {
  EscapeBox e;
  if (p.window.empty()) return e;
  std::size_t w = 0;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    if (g.is_lattice(i)) continue;
    if (w >= p.window.size()) throw InputError("window needs a range for every non-lattice coordinate");
    const auto [lo, hi] = p.window[w++];
    if (std::find(allowed.begin(), allowed.end(), i) == allowed.end()) continue;
    const double pad = p.escape_margin * (hi - lo);
    e.axes.push_back(i);
    e.lo.push_back(lo - pad);
    e.hi.push_back(hi + pad);
  }
  return e;
}

/// Exploration cell: two grid cells of the window (or 0.1 without a window); circles in 32 bins.
inline double explore_cell(const ReachParams& p) {
  if (p.window.empty()) return 0.1;
  double w = std::numeric_limits<double>::infinity();
  for (const auto& [lo, hi] : p.window) w = std::min(w, 2.0 * (hi - lo) / double(kGridPoints - 1));
  return w;
}

}  // namespace detail

/// Everything a per-set or control-set estimate was built from.
struct PerSetState {
  const LinearSystem* sys = nullptr;
  PerSetQuery query;
  FiberInfo fiber;
  Metric match;
  std::unique_ptr<SampleTree> forward;
  std::unique_ptr<SampleTree> backward;
  // Per forward sample: node steered from (local index, -1 none), the steering law and path.
  std::vector<int> steer_node;
  std::vector<ControlLaw> steer_law;
  std::vector<std::vector<Vector>> steer_path;
  // Per forward sample: furthest marked node and the sample whose steering certified it.
  std::vector<int> mark_upto;
  std::vector<std::uint32_t> mark_source;
  // Best loop (fiber mode): law from e back to F, its gain along the central axes.
  ControlLaw loop_law;
  Vector loop_gain;
  std::vector<Vector> loop_path;

  /// Distance from x to F in the matching metric.
  double distance_to_f(const double* x) const {
    switch (query.kind) {
      case FKind::PointList: {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& p : query.points) d = std::min(d, match.distance(x, p.data()));
        return d;
      }
      case FKind::CentralSubgroup:
        if (fiber.active) {
          double d = 0.0;
          for (std::size_t k = 0; k < match.axes.size(); ++k) {
            double v = std::abs(x[match.axes[k]]);
            if (match.circle[k]) v = std::min(std::fmod(v, 1.0), 1.0 - std::fmod(v, 1.0));
            d = std::max(d, v);
          }
          return d;
        } else {
          const Vector v = Eigen::Map<const Vector>(x, sys->n());
          return (v - zero_projector * v).cwiseAbs().maxCoeff();
        }
      default: {
        const Vector e = Vector::Zero(sys->n());
        return match.distance(x, e.data());
      }
    }
  }

  Matrix zero_projector;
};

struct WitnessAudit {
  bool ok = false;
  double start_distance = 0.0;   // start point to F
  double reach_error = 0.0;      // re-simulated u1 endpoint vs the reported point
  double return_distance = 0.0;  // re-simulated u2 endpoint to F
  double tau1 = 0.0;
  double tau2 = 0.0;
};

namespace detail {

/// Steers x towards F by repeatedly jumping onto the backward tree: find the recorded backward
/// point within `radius` that is closest in time to F, follow its reversed law for `window`
/// time, repeat. Only backward nodes below `node_limit` are used.
struct Steerer {
  const PerSetState* st;
  const std::unordered_map<std::uint64_t, std::vector<std::uint32_t>>* anchors;
  const CellHash* hash;
  double radius;
  double goal;
  double window;
  double step;

  std::optional<std::uint32_t> anchor(const double* x, std::uint32_t node_limit, std::vector<std::uint64_t>& keys) const {
    hash->keys_near(x, keys);
    std::optional<std::uint32_t> best;
    double best_t = std::numeric_limits<double>::infinity();
    for (auto k : keys) {
      auto it = anchors->find(k);
      if (it == anchors->end()) continue;
      for (auto id : it->second) {
        if (id >= node_limit) break;
        const double t = st->backward->chain_time(id);
        if (t >= best_t) continue;
        if (st->match.distance(x, st->backward->node(id)) <= radius) {
          best = id;
          best_t = t;
        }
      }
    }
    return best;
  }

  /// x is already within the goal of F, or has an anchor to steer from.
  bool can_start(const double* x, std::uint32_t node_limit, std::vector<std::uint64_t>& keys) const {
    return st->distance_to_f(x) < goal || anchor(x, node_limit, keys).has_value();
  }

  bool run(const Vector& start, std::uint32_t node_limit, ControlLaw& law, std::vector<Vector>& path) const {
    const LinearSystem& sys = *st->sys;
    FieldKernel kernel(sys);
    Vector x = start;
    law = ControlLaw();
    path.clear();
    std::vector<std::uint64_t> keys;
    double tau_prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 4000; ++it) {
      if (st->distance_to_f(x.data()) < goal) return true;
      const auto q = anchor(x.data(), node_limit, keys);
      if (!q) return false;
      const double tau = st->backward->chain_time(*q);
      if (!(tau < tau_prev - 1e-12)) return false;
      tau_prev = tau;
      const double w = tau <= 1.5 * window ? tau : window;
      if (!(w > 0.0)) return false;
      const ControlLaw seg = st->backward->chain_law(*q).reversed().truncated(w);
      for (const auto& piece : seg.pieces()) {
        const Vector z = sys.control_vector(piece.value);
        const std::size_t ns = substeps(piece.duration, step, 1);
        const double h = piece.duration / double(ns);
        for (std::size_t s = 0; s < ns; ++s) {
          path.push_back(x);
          kernel.rk4_step(x.data(), z.data(), h);
        }
      }
      law.append(seg);
    }
    return false;
  }
};

}  // namespace detail

inline constexpr double kSteerWindow = 0.25;
inline constexpr std::size_t kLoopSearchSamples = 512;

namespace detail {

inline std::unique_ptr<PerSetState> build_state(const LinearSystem& sys, const PerSetQuery& q,
                                                bool central_seed) {
  auto st = std::make_unique<PerSetState>();
  st->sys = &sys;
  st->query = q;
  const auto& g = sys.group();
  st->fiber = central_seed ? fiber_info(sys) : FiberInfo{};
  if (!st->fiber.active) {
    st->fiber.base_axes.clear();
    for (std::size_t j = 0; j < g.dim(); ++j) st->fiber.base_axes.push_back(j);
  }
  st->match = metric_on(g, st->fiber.base_axes);
  if (q.kind == FKind::CentralSubgroup && !st->fiber.active) {
    const auto dec = spectral_decompose(g.algebra(), sys.derivation());
    st->zero_projector = Matrix::Zero(sys.n(), sys.n());
    if (dec.zero.cols() > 0) {
      st->zero_projector = dec.zero * (dec.zero.transpose() * dec.zero).inverse() * dec.zero.transpose();
    }
  }
  return st;
}

inline std::vector<Vector> roots_for(const LinearSystem& sys, const PerSetQuery& q) {
  if (q.kind == FKind::PointList) {
    if (q.points.empty()) throw InputError("point_list query needs at least one point");
    for (const auto& v : q.points) linalg::require_size(v, sys.n(), "F point");
    return q.points;
  }
  return {sys.group().identity().coords};
}

/// F is invariant under the drift flow (and u = 0 is admissible): then F lies in Per(F).
inline bool f_invariant(const LinearSystem& sys, const PerSetQuery& q) {
  if (!sys.omega().contains(Vector::Zero(static_cast<Eigen::Index>(sys.m())))) return false;
  if (q.kind != FKind::PointList) return true;
  for (const auto& v : q.points) {
    if ((sys.drift() * v).cwiseAbs().maxCoeff() > 1e-12) return false;
  }
  return true;
}

inline void grow_trees(PerSetState& st, const std::vector<Vector>& roots, const ReachParams& p) {
  const auto& g = st.sys->group();
  const CellHash explore(st.match, explore_cell(p));
  std::vector<std::size_t> escape_axes;
  for (auto a : st.fiber.base_axes) escape_axes.push_back(a);
  const EscapeBox esc = escape_box(g, p, escape_axes);
  st.forward = std::make_unique<SampleTree>(*st.sys, Direction::Forward, roots, explore, esc, p, 0xF0);
  st.backward = std::make_unique<SampleTree>(*st.sys, Direction::Backward, roots, explore, esc, p, 0xB0);
  st.forward->grow(p.budget);
  st.backward->grow(p.budget);
}

/// Writes In for every cell holding one of the given points (fiber mode: the whole fiber).
/// Returns the flat base-cell indices touched.
inline void mark_cells(Grid& grid, const FiberInfo& fiber, const double* x, CellClass cls, std::vector<std::size_t>& scratch) {
  const auto cell = grid.cell_of(x);
  if (!fiber.active) {
    if (cell && grid.cells[*cell] < cls) grid.cells[*cell] = cls;
    return;
  }
  // Locate the base indices; iterate over all indices along fiber axes.
  std::vector<std::size_t> m(grid.axes().size(), 0);
  std::vector<std::size_t> fiber_axes;
  for (std::size_t a = 0; a < grid.axes().size(); ++a) {
    const auto& ax = grid.axes()[a];
    if (std::find(fiber.central_axes.begin(), fiber.central_axes.end(), ax.coord) != fiber.central_axes.end()) {
      fiber_axes.push_back(a);
      continue;
    }
    const long i = ax.index(x[ax.coord]);
    if (i < 0) return;
    m[a] = static_cast<std::size_t>(i);
  }
  scratch.clear();
  std::size_t combos = 1;
  for (auto a : fiber_axes) combos *= grid.axes()[a].count;
  for (std::size_t c = 0; c < combos; ++c) {
    std::size_t r = c;
    for (auto a : fiber_axes) {
      m[a] = r % grid.axes()[a].count;
      r /= grid.axes()[a].count;
    }
    const std::size_t f = grid.flat(m);
    if (grid.cells[f] < cls) grid.cells[f] = cls;
  }
}

/// Cells of a grid (restricted to base axes) reached by any node of either tree become Out.
inline void mark_visited(Grid& grid, const PerSetState& st) {
  std::vector<std::size_t> scratch;
  // Work on distinct base cells to keep the fiber fill cheap.
  std::unordered_map<std::uint64_t, std::uint32_t> seen;
  const CellHash base(st.match, 1e-9);
  for (const SampleTree* t : {st.forward.get(), st.backward.get()}) {
    for (std::size_t i = 0; i < t->node_count(); ++i) {
      const auto cell = grid.cell_of(t->node(i));
      if (!cell) continue;
      if (!st.fiber.active) {
        if (grid.cells[*cell] == CellClass::Unknown) grid.cells[*cell] = CellClass::Out;
        continue;
      }
      // Base cell id: flat index with fiber axes zeroed.
      auto m = grid.multi(*cell);
      for (std::size_t a = 0; a < m.size(); ++a) {
        const auto c = grid.axes()[a].coord;
        if (std::find(st.fiber.central_axes.begin(), st.fiber.central_axes.end(), c) != st.fiber.central_axes.end()) m[a] = 0;
      }
      if (seen.emplace(grid.flat(m), 0).second) mark_cells(grid, st.fiber, t->node(i), CellClass::Out, scratch);
    }
  }
}

}  // namespace detail

/// Sampled reachable set from x0: every recorded point of n_samples random laws over [0, T_max]
/// (branching from earlier samples). Backward gives the points reaching x0.
inline RegionEstimate sample_reachable(const LinearSystem& sys, const Vector& x0, ReachParams p,
                                       Direction dir = Direction::Forward) {
  if (p.budget == 0) throw InputError("sample_reachable needs n_samples > 0");
  const auto& g = sys.group();
  std::vector<std::size_t> all;
  for (std::size_t j = 0; j < g.dim(); ++j) all.push_back(j);
  const Metric m = detail::metric_on(g, all);
  SampleTree tree(sys, dir, {x0}, CellHash(m, detail::explore_cell(p)), detail::escape_box(g, p, all), p, dir == Direction::Forward ? 0xF0 : 0xB0);
  tree.grow(p.budget);
  RegionEstimate est;
  est.params = p;
  est.points.resize(sys.n(), static_cast<Eigen::Index>(tree.node_count()));
  for (std::size_t i = 0; i < tree.node_count(); ++i) {
    est.points.col(static_cast<Eigen::Index>(i)) = tree.node_vector(i);
    est.witnesses.push_back({WitnessRef::Sample, static_cast<std::uint32_t>(i), 0});
  }
  est.bbox = make_bbox(g, est.points);
  return est;
}

/// Points visited by explicit laws from x0 (no sampling).
inline RegionEstimate reach_from_laws(const LinearSystem& sys, const Vector& x0, const std::vector<ControlLaw>& laws,
                                      ReachParams p) {
  const auto& g = sys.group();
  std::vector<std::size_t> all;
  for (std::size_t j = 0; j < g.dim(); ++j) all.push_back(j);
  SampleTree tree(sys, Direction::Forward, {x0}, CellHash(detail::metric_on(g, all), 1.0), EscapeBox{}, p, 0xF0);
  for (const auto& law : laws) tree.add_law(0, law);
  RegionEstimate est;
  est.params = p;
  est.points.resize(sys.n(), static_cast<Eigen::Index>(tree.node_count()));
  for (std::size_t i = 0; i < tree.node_count(); ++i) est.points.col(static_cast<Eigen::Index>(i)) = tree.node_vector(i);
  est.bbox = make_bbox(g, est.points);
  return est;
}

/// Estimate of Per(F): forward and backward clouds from F; each forward sample is steered back
/// to F along the backward tree, and on success every earlier point of its chain is marked
/// (the whole trajectory from F to near F is periodic). With a window, cells holding marked
/// points are In, other visited cells Out, unvisited Unknown.
inline RegionEstimate estimate_per_set(const LinearSystem& sys, const PerSetQuery& query, ReachParams p,
                                       bool with_grid = true) {
  if (!(query.epsilon > 0.0)) throw InputError("per-set tolerance must be positive");
  p.epsilon = query.epsilon;
  RegionEstimate est;
  est.params = p;
  const auto& g = sys.group();
  auto st = detail::build_state(sys, query, query.kind == FKind::CentralSubgroup);
  const auto roots = detail::roots_for(sys, query);
  const bool invariant = detail::f_invariant(sys, query);

  PointBuffer marked(static_cast<std::size_t>(sys.n()));
  std::vector<WitnessRef> refs;
  if (invariant) {
    for (std::size_t r = 0; r < roots.size(); ++r) {
      marked.push(g.reduce(roots[r]).coords.data());
      refs.push_back({WitnessRef::Root, static_cast<std::uint32_t>(r), 0});
    }
  }
  if (p.budget == 0) {
    est.diagnostics.push_back("zero budget: no samples drawn");
  } else {
    detail::grow_trees(*st, roots, p);
    const SampleTree& fw = *st->forward;
    const SampleTree& bw = *st->backward;

    // Anchor index over backward nodes, in node order.
    const double radius = 0.5 * query.epsilon;
    const CellHash hash(st->match, radius);
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> anchors;
    for (std::size_t i = 0; i < bw.node_count(); ++i) anchors[hash.key(bw.node(i))].push_back(static_cast<std::uint32_t>(i));
    const detail::Steerer steer{st.get(), &anchors, &hash, radius, 0.75 * query.epsilon, kSteerWindow, p.step};

    const std::size_t ns = fw.samples().size();
    st->steer_node.assign(ns, -1);
    st->steer_law.assign(ns, ControlLaw());
    st->steer_path.assign(ns, {});
    parallel_for(ns, p.threads, [&](std::size_t s) {
      const auto& rec = fw.samples()[s];
      const std::uint32_t limit = s < bw.samples().size() ? bw.samples()[s].first : static_cast<std::uint32_t>(bw.node_count());
      std::vector<std::uint64_t> keys;
      // Last node with an anchor, then two earlier ones.
      int last = -1;
      for (int k = static_cast<int>(rec.count) - 1; k >= 1; --k) {
        if (steer.can_start(fw.node(rec.first + static_cast<std::uint32_t>(k)), limit, keys)) {
          last = k;
          break;
        }
      }
      if (last < 1) return;
      std::vector<int> tries{last};
      for (int frac : {2, 1}) {
        for (int k = last * frac / 3; k >= 1; --k) {
          if (steer.can_start(fw.node(rec.first + static_cast<std::uint32_t>(k)), limit, keys)) {
            if (std::find(tries.begin(), tries.end(), k) == tries.end()) tries.push_back(k);
            break;
          }
        }
      }
      for (int k : tries) {
        ControlLaw law;
        std::vector<Vector> path;
        if (steer.run(fw.node_vector(rec.first + static_cast<std::uint32_t>(k)), limit, law, path)) {
          st->steer_node[s] = k;
          st->steer_law[s] = std::move(law);
          st->steer_path[s] = std::move(path);
          return;
        }
      }
    });

    // Propagate marks to ancestors: a chain certified up to node k certifies its parent up
    // to the branch node.
    st->mark_upto.assign(ns, -1);
    st->mark_source.assign(ns, 0);
    for (std::size_t s = 0; s < ns; ++s) {
      if (st->steer_node[s] >= 0) {
        st->mark_upto[s] = st->steer_node[s];
        st->mark_source[s] = static_cast<std::uint32_t>(s);
      }
    }
    for (std::size_t s = ns; s-- > 0;) {
      const auto& rec = fw.samples()[s];
      if (st->mark_upto[s] < 0 || rec.parent < 0) continue;
      const auto par = static_cast<std::size_t>(rec.parent);
      if (static_cast<int>(rec.branch) > st->mark_upto[par]) {
        st->mark_upto[par] = static_cast<int>(rec.branch);
        st->mark_source[par] = st->mark_source[s];
      }
    }
    std::size_t steered = 0;
    for (std::size_t s = 0; s < ns; ++s) {
      const auto& rec = fw.samples()[s];
      steered += st->steer_node[s] >= 0;
      for (int k = 1; k <= st->mark_upto[s]; ++k) {
        const auto id = rec.first + static_cast<std::uint32_t>(k);
        marked.push(fw.node(id));
        refs.push_back({WitnessRef::Chain, id, 0});
      }
      for (std::size_t k = 0; k < st->steer_path[s].size(); ++k) {
        if (k == 0) continue;  // the steering start is a chain node
        marked.push(g.reduce(st->steer_path[s][k]).coords.data());
        refs.push_back({WitnessRef::Steer, static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(k)});
      }
    }
    est.diagnostics.push_back("steered " + std::to_string(steered) + " of " + std::to_string(ns) + " forward samples back to F");

    // Loop amplification along non-lattice central axes (fiber mode): the best gain loop from
    // e, translated by multiples of its gain, certifies points far along G0.
    std::vector<std::size_t> free_axes;
    for (auto a : st->fiber.central_axes) {
      if (!g.is_lattice(a)) free_axes.push_back(a);
    }
    if (query.kind == FKind::CentralSubgroup && st->fiber.active && !free_axes.empty()) {
      // Candidates: every steered loop, plus loops closed from early nodes of the first
      // samples (short loops repeat more often within the horizon). Score = copies * gain.
      std::vector<ControlLaw> cands;
      for (std::size_t s = 0; s < ns; ++s) {
        if (st->steer_node[s] < 0) continue;
        ControlLaw law = fw.chain_law(fw.samples()[s].first + static_cast<std::uint32_t>(st->steer_node[s]));
        law.append(st->steer_law[s]);
        cands.push_back(std::move(law));
      }
      {
        std::vector<std::vector<ControlLaw>> extra(std::min<std::size_t>(ns, kLoopSearchSamples));
        parallel_for(extra.size(), p.threads, [&](std::size_t s) {
          const auto& rec = fw.samples()[s];
          if (rec.parent >= 0) return;
          const std::uint32_t limit = s < bw.samples().size() ? bw.samples()[s].first : static_cast<std::uint32_t>(bw.node_count());
          std::vector<std::uint64_t> keys;
          int k = static_cast<int>(rec.count) - 1;
          for (double cut = 0.5 * p.t_max; cut >= p.dwell_min; cut *= 0.5) {
            while (k >= 1 && fw.local_time(rec.first + static_cast<std::uint32_t>(k)) > cut) --k;
            if (k < 1) break;
            ControlLaw law;
            std::vector<Vector> path;
            const auto id = rec.first + static_cast<std::uint32_t>(k);
            if (steer.run(fw.node_vector(id), limit, law, path)) {
              ControlLaw loop = fw.chain_law(id);
              loop.append(law);
              extra[s].push_back(std::move(loop));
            }
          }
        });
        for (auto& e : extra) {
          for (auto& l : e) cands.push_back(std::move(l));
        }
      }
      double best_score = 0.0;
      std::size_t best = cands.size();
      const Vector e0 = g.identity().coords;
      for (std::size_t c = 0; c < cands.size(); ++c) {
        const double dur = cands[c].duration();
        if (!(dur > 0.0)) continue;
        const auto tr = simulate(sys, {e0}, cands[c], p.step);
        double gain = 0.0;
        for (auto a : free_axes) gain = std::max(gain, std::abs(tr.end()(static_cast<Eigen::Index>(a))));
        const double score = std::floor(p.t_max / dur) * gain;
        if (score > best_score) {
          best_score = score;
          best = c;
        }
      }
      if (best < cands.size()) {
        st->loop_law = cands[best];
        const auto tr = simulate(sys, {e0}, st->loop_law, p.step);
        st->loop_gain = Vector::Zero(sys.n());
        for (auto a : free_axes) st->loop_gain(static_cast<Eigen::Index>(a)) = tr.end()(static_cast<Eigen::Index>(a));
        st->loop_path = tr.points;
        const double dur = st->loop_law.duration();
        const auto copies = static_cast<std::size_t>(std::floor(p.t_max / dur));
        for (std::size_t k = 1; k < copies; ++k) {
          for (std::size_t m = 1; m + 1 < tr.points.size(); ++m) {
            marked.push(g.reduce(tr.points[m] + double(k) * st->loop_gain).coords.data());
            refs.push_back({WitnessRef::Loop, static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(k)});
          }
        }
        est.diagnostics.push_back("loop gain " + std::to_string(st->loop_gain.cwiseAbs().maxCoeff()) + " over " +
                                  std::to_string(dur) + " time units, " + std::to_string(copies > 0 ? copies - 1 : 0) +
                                  " translated copies");
      }
    }
  }

  est.points = marked.matrix();
  est.witnesses = std::move(refs);
  est.bbox = make_bbox(g, est.points);
  if (marked.empty()) est.diagnostics.push_back("no witness found: empty estimate");

  if (with_grid && !p.window.empty()) {
    Grid grid = make_grid(g, p.window);
    if (st->forward) detail::mark_visited(grid, *st);
    std::vector<std::size_t> scratch;
    std::unordered_map<std::uint64_t, char> seen;
    for (std::size_t i = 0; i < marked.size(); ++i) {
      const auto cell = grid.cell_of(marked.at(i));
      if (!cell) continue;
      if (st->fiber.active) {
        auto m = grid.multi(*cell);
        for (std::size_t a = 0; a < m.size(); ++a) {
          const auto c = grid.axes()[a].coord;
          if (std::find(st->fiber.central_axes.begin(), st->fiber.central_axes.end(), c) != st->fiber.central_axes.end()) m[a] = 0;
        }
        if (!seen.emplace(grid.flat(m), 0).second) continue;
      }
      detail::mark_cells(grid, st->fiber, marked.at(i), CellClass::In, scratch);
    }
    est.grid = std::move(grid);
  }
  est.state = std::move(st);
  return est;
}

/// Re-simulates the witness of point i: u1 from a point of F to the point and u2 from the
/// point back to F. ok when u1 lands on the point (1e-6) and u2 ends within epsilon of F.
inline WitnessAudit audit_witness(const RegionEstimate& est, std::size_t i) {
  if (!est.state) throw InputError("estimate has no witness data");
  const PerSetState& st = *est.state;
  const LinearSystem& sys = *st.sys;
  const auto& g = sys.group();
  const double step = est.params.step;
  const Vector point = est.points.col(static_cast<Eigen::Index>(i));
  const WitnessRef ref = est.witnesses.at(i);
  WitnessAudit out;
  Vector start;
  ControlLaw u1, u2;
  switch (ref.kind) {
    case WitnessRef::Root:
      // Zero control keeps an invariant F point in F.
      out.ok = st.distance_to_f(point.data()) < 1e-12;
      return out;
    case WitnessRef::Chain: {
      const SampleTree& fw = *st.forward;
      const std::uint32_t s = fw.owner(ref.a);
      const std::uint32_t src = st.mark_source.at(s);
      const auto src_node = fw.samples()[src].first + static_cast<std::uint32_t>(st.steer_node[src]);
      ControlLaw full = fw.chain_law(src_node);
      out.tau1 = fw.chain_time(ref.a);
      u1 = full.truncated(out.tau1);
      u2 = full.shifted(out.tau1);
      u2.append(st.steer_law[src]);
      start = fw.roots()[fw.root_of(ref.a)];
      break;
    }
    case WitnessRef::Steer: {
      const SampleTree& fw = *st.forward;
      const auto node = fw.samples()[ref.a].first + static_cast<std::uint32_t>(st.steer_node[ref.a]);
      ControlLaw full = fw.chain_law(node);
      // Step ref.b along the steering path: recover its time from the steering law.
      double t = 0.0;
      std::size_t k = 0;
      for (const auto& piece : st.steer_law[ref.a].pieces()) {
        const std::size_t n_sub = substeps(piece.duration, step, 1);
        const double h = piece.duration / double(n_sub);
        if (k + n_sub > ref.b) {
          t += double(ref.b - k) * h;
          k = ref.b;
          break;
        }
        k += n_sub;
        t += piece.duration;
      }
      const double t0 = fw.chain_time(node);
      full.append(st.steer_law[ref.a]);
      out.tau1 = t0 + t;
      u1 = full.truncated(out.tau1);
      u2 = full.shifted(out.tau1);
      start = fw.roots()[fw.root_of(node)];
      break;
    }
    case WitnessRef::Loop: {
      Vector shift = double(ref.b) * st.loop_gain;
      start = g.reduce(g.identity().coords + shift).coords;
      // Node ref.a of the loop trajectory: find its time by replaying the grid.
      const auto tr = simulate(sys, {g.identity().coords}, st.loop_law, step);
      out.tau1 = tr.times.at(ref.a);
      u1 = st.loop_law.truncated(out.tau1);
      u2 = st.loop_law.shifted(out.tau1);
      break;
    }
    default:
      throw InputError("point has no periodic witness");
  }
  out.start_distance = st.distance_to_f(start.data());
  const auto a = simulate(sys, {start}, u1, step);
  out.reach_error = g.distance(a.end(), point);
  const auto b = simulate(sys, {a.end()}, u2, step);
  out.tau2 = u2.duration();
  out.return_distance = st.distance_to_f(b.end().data());
  out.ok = out.start_distance < 1e-12 && out.reach_error < 1e-6 && out.return_distance < st.query.epsilon;
  return out;
}

struct ControlSetEstimate {
  RegionEstimate region;
  std::size_t no_return_checked = 0;     // forward samples examined
  std::size_t no_return_violations = 0;  // in C, then clearly outside, then in C again
};

inline constexpr std::size_t kNoReturnMargin = 2;
inline constexpr double kCollapseFraction = 0.05;
inline constexpr std::size_t kCollapsePoints = 21;
inline constexpr std::size_t kCollapseBins = 16;

/// int C for the control set containing e: cells reached (within epsilon) both by the forward
/// and by the backward cloud from e. When g0 is a central coordinate subspace killed by D,
/// G0 lies in int C and the estimate is filled along it.
inline ControlSetEstimate estimate_control_set(const LinearSystem& sys, ReachParams p) {
  if (p.window.empty()) throw InputError("control set estimate needs a grid window");
  ControlSetEstimate out;
  RegionEstimate& est = out.region;
  est.params = p;
  const auto& g = sys.group();
  PerSetQuery q;
  q.kind = FKind::CentralSubgroup;
  q.epsilon = p.epsilon;
  // The G0 seed needs 0 inside the control range; otherwise classify on every axis.
  auto st = detail::build_state(sys, q, sys.omega().zero_in_interior());
  Grid grid = make_grid(g, p.window);
  if (p.budget == 0) {
    est.diagnostics.push_back("zero budget: no samples drawn");
    est.grid = std::move(grid);
    est.points.resize(sys.n(), 0);
    est.bbox = make_bbox(g, est.points);
    return out;
  }
  const auto roots = detail::roots_for(sys, q);
  detail::grow_trees(*st, roots, p);

  // Thickened occupancy on the base axes.
  std::vector<std::size_t> base_grid_axes;
  for (std::size_t a = 0; a < grid.axes().size(); ++a) {
    const auto c = grid.axes()[a].coord;
    if (std::find(st->fiber.base_axes.begin(), st->fiber.base_axes.end(), c) != st->fiber.base_axes.end()) base_grid_axes.push_back(a);
  }
  std::vector<GridAxis> baxes;
  for (auto a : base_grid_axes) baxes.push_back(grid.axes()[a]);
  Grid base(baxes);
  auto occupancy = [&](const SampleTree& t) {
    std::vector<bool> occ(base.size(), false);
    std::vector<long> lo(baxes.size()), hi(baxes.size());
    for (std::size_t i = 0; i < t.node_count(); ++i) {
      const double* x = t.node(i);
      bool any = true;
      for (std::size_t k = 0; k < baxes.size(); ++k) {
        const auto& ax = baxes[k];
        const double v = x[ax.coord];
        const double reach = 0.5 * ax.width() + p.epsilon;
        if (ax.circle) {
          lo[k] = static_cast<long>(std::floor((v - reach) * double(ax.count)));
          hi[k] = static_cast<long>(std::floor((v + reach) * double(ax.count)));
        } else {
          lo[k] = std::max<long>(0, static_cast<long>(std::ceil((v - reach - ax.lo) / ax.width())));
          hi[k] = std::min<long>(static_cast<long>(ax.count) - 1, static_cast<long>(std::floor((v + reach - ax.lo) / ax.width())));
          if (lo[k] > hi[k]) any = false;
        }
      }
      if (!any) continue;
      std::vector<long> m(lo);
      while (true) {
        std::size_t f = 0, stride = 1;
        for (std::size_t k = 0; k < baxes.size(); ++k) {
          long idx = m[k];
          if (baxes[k].circle) idx = ((idx % static_cast<long>(baxes[k].count)) + static_cast<long>(baxes[k].count)) % static_cast<long>(baxes[k].count);
          f += static_cast<std::size_t>(idx) * stride;
          stride *= baxes[k].count;
        }
        occ[f] = true;
        std::size_t k = 0;
        for (; k < baxes.size(); ++k) {
          if (++m[k] <= hi[k]) break;
          m[k] = lo[k];
        }
        if (k == baxes.size()) break;
      }
    }
    return occ;
  };
  const auto fwd = occupancy(*st->forward);
  const auto bwd = occupancy(*st->backward);
  for (std::size_t f = 0; f < base.size(); ++f) {
    base.cells[f] = fwd[f] && bwd[f] ? CellClass::In : (fwd[f] || bwd[f] ? CellClass::Out : CellClass::Unknown);
  }
  // Seed: e (and G0 by the fiber fill) lies in int C.
  {
    const Vector e = g.identity().coords;
    if (auto c = base.cell_of(e.data())) base.cells[*c] = CellClass::In;
  }
  // Broadcast the base classification along the fiber axes.
  for (std::size_t f = 0; f < grid.size(); ++f) {
    const auto m = grid.multi(f);
    std::vector<std::size_t> bm;
    for (auto a : base_grid_axes) bm.push_back(m[a]);
    grid.cells[f] = base.cells[base.flat(bm)];
  }

  // Points: forward nodes lying in In cells.
  std::vector<Vector> pts;
  const SampleTree& fw = *st->forward;
  for (std::size_t i = 0; i < fw.node_count(); ++i) {
    const auto c = base.cell_of(fw.node(i));
    if (c && base.cells[*c] == CellClass::In) pts.push_back(fw.node_vector(i));
  }
  est.points.resize(sys.n(), static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    est.points.col(static_cast<Eigen::Index>(i)) = pts[i];
    est.witnesses.push_back({WitnessRef::Sample, 0, 0});
  }
  est.bbox = make_bbox(g, est.points);

  // Collapse check: a cloud on a lower-dimensional set fills a small part of its own box.
  {
    // Coarse grid over every coordinate, so the fiber fill cannot hide a thin cloud.
    const Grid coarse = make_grid(g, p.window, kCollapsePoints, kCollapseBins);
    const auto& caxes = coarse.axes();
    std::vector<bool> hit(coarse.size(), false);
    std::vector<std::size_t> lo(caxes.size(), std::numeric_limits<std::size_t>::max()), hi(caxes.size(), 0);
    std::size_t distinct = 0;
    for (std::size_t i = 0; i < fw.node_count(); ++i) {
      const auto c = coarse.cell_of(fw.node(i));
      if (!c || hit[*c]) continue;
      hit[*c] = true;
      ++distinct;
      const auto m = coarse.multi(*c);
      for (std::size_t k = 0; k < m.size(); ++k) {
        lo[k] = std::min(lo[k], m[k]);
        hi[k] = std::max(hi[k], m[k]);
      }
    }
    std::size_t box = distinct ? 1 : 0;
    for (std::size_t k = 0; k < caxes.size() && distinct; ++k) box *= hi[k] - lo[k] + 1;
    if (distinct == 0 || (box > 0 && double(distinct) < kCollapseFraction * double(box))) {
      est.diagnostics.push_back("forward samples occupy " + std::to_string(distinct) + " of " + std::to_string(box) +
                                " cells of their bounding box; O+(e) may not be open");
    }
  }

  // No-return spot check along forward samples.
  const auto near = base.dilated_in(kNoReturnMargin);
  for (const auto& rec : fw.samples()) {
    ++out.no_return_checked;
    int state = 0;  // 0 before entering C, 1 inside, 2 left far away
    for (std::uint32_t k = 0; k < rec.count; ++k) {
      const auto c = base.cell_of(fw.node(rec.first + k));
      const bool in = c && base.cells[*c] == CellClass::In;
      const bool far = !c || !near[*c];
      if (in && state == 2) {
        ++out.no_return_violations;
        break;
      }
      if (in) state = 1;
      else if (far && state == 1) state = 2;
    }
  }
  est.grid = std::move(grid);
  est.state = std::move(st);
  return out;
}

enum class Verdict { Bounded, Unbounded, Inconclusive };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Bounded: return "BOUNDED";
    case Verdict::Unbounded: return "UNBOUNDED";
    default: return "INCONCLUSIVE";
  }
}

struct SchedulePoint {
  double t_max = 0.0;
  std::size_t budget = 0;
};

inline constexpr double kStableGrowth = 0.02;
inline constexpr double kUnboundedFactor = 10.0;

struct BoundednessReport {
  Verdict verdict = Verdict::Inconclusive;
  std::vector<SchedulePoint> schedule;
  std::vector<Vector> extents;  // bbox extent per non-lattice coordinate at each schedule point
  std::vector<std::size_t> axes;
  bool g0_compact = false;
  bool agrees_with_compactness = false;
  double max_central_witness = 0.0;  // largest |coordinate| along non-lattice g0 axes among audited points
  std::size_t audited = 0;
  std::size_t audit_failures = 0;
  std::vector<std::string> diagnostics;
};

/// Per(G0) at each (T_max, budget): BOUNDED when no extent grows by 2% or more over the last
/// step, UNBOUNDED when some extent grows monotonically to over 10x its first value,
/// INCONCLUSIVE otherwise. Compared with compactness of G0.
inline BoundednessReport boundedness_report(const LinearSystem& sys, const std::vector<SchedulePoint>& schedule,
                                            ReachParams p) {
  if (schedule.size() < 2) throw InputError("boundedness_report needs at least two schedule points");
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (!(schedule[i].t_max >= schedule[i - 1].t_max && schedule[i].budget >= schedule[i - 1].budget) ||
        (schedule[i].t_max == schedule[i - 1].t_max && schedule[i].budget == schedule[i - 1].budget)) {
      throw InputError("schedule must be increasing");
    }
  }
  if (p.window.empty()) throw InputError("boundedness_report needs a window for the escape box");
  BoundednessReport rep;
  rep.schedule = schedule;
  rep.g0_compact = g0_compact(sys);
  const auto fiber = fiber_info(sys);
  PerSetQuery q;
  q.kind = FKind::CentralSubgroup;
  q.epsilon = p.epsilon;
  for (const auto& sp : schedule) {
    ReachParams run = p;
    run.t_max = sp.t_max;
    run.budget = sp.budget;
    const auto est = estimate_per_set(sys, q, run, false);
    rep.axes = est.bbox.axes;
    rep.extents.push_back(est.bbox.extent());
    for (const auto& d : est.diagnostics) rep.diagnostics.push_back("T=" + std::to_string(sp.t_max) + ": " + d);
    if (&sp == &schedule.back()) {
      // Audit the farthest points along free central axes (plus a few others).
      std::vector<std::size_t> idx;
      for (auto a : fiber.central_axes) {
        if (sys.group().is_lattice(a) || est.size() == 0) continue;
        Eigen::Index best = 0;
        est.points.row(static_cast<Eigen::Index>(a)).cwiseAbs().maxCoeff(&best);
        idx.push_back(static_cast<std::size_t>(best));
      }
      for (std::size_t k = 0; k < 8 && est.size() > 0; ++k) idx.push_back(k * est.size() / 8);
      for (auto i : idx) {
        const auto audit = audit_witness(est, i);
        ++rep.audited;
        if (!audit.ok) {
          ++rep.audit_failures;
          continue;
        }
        for (auto a : fiber.central_axes) {
          if (!sys.group().is_lattice(a)) {
            rep.max_central_witness = std::max(rep.max_central_witness, std::abs(est.points(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i))));
          }
        }
      }
    }
  }
  const auto& first = rep.extents.front();
  const auto& last = rep.extents.back();
  const auto& prev = rep.extents[rep.extents.size() - 2];
  bool stable = true;
  bool grows = false;
  for (Eigen::Index a = 0; a < last.size(); ++a) {
    const double rel = (last(a) - prev(a)) / std::max(prev(a), 1e-12);
    if (rel >= kStableGrowth) stable = false;
    bool monotone = true;
    for (std::size_t i = 1; i < rep.extents.size(); ++i) monotone = monotone && rep.extents[i](a) >= rep.extents[i - 1](a);
    if (monotone && last(a) > kUnboundedFactor * std::max(first(a), 1e-12)) grows = true;
  }
  // Samples stop at the escape box, so an extent pinned there says nothing about boundedness.
  const EscapeBox esc = detail::escape_box(sys.group(), p, fiber.active ? fiber.base_axes : rep.axes);
  bool capped = false;
  for (std::size_t k = 0; k < esc.axes.size(); ++k) {
    const auto it = std::find(rep.axes.begin(), rep.axes.end(), esc.axes[k]);
    if (it == rep.axes.end()) continue;
    const auto a = static_cast<Eigen::Index>(it - rep.axes.begin());
    if (last(a) >= 0.9 * (esc.hi[k] - esc.lo[k])) capped = true;
  }
  if (capped) rep.diagnostics.push_back("per-set extent reaches the escape box; widen the window");
  rep.verdict = grows ? Verdict::Unbounded : (stable && !capped ? Verdict::Bounded : Verdict::Inconclusive);
  rep.agrees_with_compactness = (rep.verdict == Verdict::Bounded && rep.g0_compact) ||
                            (rep.verdict == Verdict::Unbounded && !rep.g0_compact);
  return rep;
}

}  // namespace liectl
