#pragma once

// 8-connected A* on a 2D occupancy raster. Shared by the scene simulator's
// ego planner and the A* baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <queue>
#include <vector>

#include "lookout/error.hpp"

namespace lookout {

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Row-major raster of blocked flags.
struct BlockedRaster {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> blocked;

  BlockedRaster() = default;
  BlockedRaster(int r, int c) : rows(r), cols(c), blocked(static_cast<std::size_t>(r) * c, 0) {}

  bool inside(Cell c) const { return c.row >= 0 && c.col >= 0 && c.row < rows && c.col < cols; }
  std::size_t index(Cell c) const { return static_cast<std::size_t>(c.row) * cols + c.col; }
  bool is_blocked(Cell c) const { return !inside(c) || blocked[index(c)] != 0; }
  void set(Cell c, bool b) { blocked[index(c)] = b ? 1 : 0; }
};

struct GridPath {
  std::vector<Cell> cells;  // start .. end, inclusive
  double cost = 0.0;        // in cell units
  bool reached_goal = false;
};

/// A* with Euclidean heuristic and sqrt(2) diagonal cost. If the goal is not
/// reachable, returns the path to the reachable free cell nearest the goal.
/// With `cut_corners` false a diagonal step needs both orthogonal neighbours free.
inline GridPath astar(const BlockedRaster& grid, Cell start, Cell goal, bool cut_corners = true) {
  if (grid.rows <= 0 || grid.cols <= 0) fail(ErrorCode::kEmptyGrid, "planning raster has no cells");
  if (grid.is_blocked(start)) fail(ErrorCode::kStartBlocked, "start cell is blocked or outside the grid");
  const std::size_t n = static_cast<std::size_t>(grid.rows) * grid.cols;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> g(n, kInf);
  std::vector<std::int64_t> parent(n, -1);
  std::vector<std::uint8_t> closed(n, 0);
  auto heuristic = [&](Cell c) { return std::hypot(double(c.row - goal.row), double(c.col - goal.col)); };

  struct Entry {
    double f;
    double h;
    std::size_t idx;
    bool operator>(const Entry& o) const {
      if (f != o.f) return f > o.f;
      if (h != o.h) return h > o.h;
      return idx > o.idx;
    }
  };
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
  const std::size_t s = grid.index(start);
  g[s] = 0;
  open.push({heuristic(start), heuristic(start), s});
  const bool goal_ok = !grid.is_blocked(goal);
  const std::size_t goal_idx = grid.inside(goal) ? grid.index(goal) : n;
  bool found = false;
  static constexpr int kDr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int kDc[8] = {0, 0, -1, 1, -1, 1, -1, 1};

  while (!open.empty()) {
    const Entry e = open.top();
    open.pop();
    if (closed[e.idx]) continue;
    closed[e.idx] = 1;
    if (goal_ok && e.idx == goal_idx) {
      found = true;
      break;
    }
    const Cell c{static_cast<int>(e.idx / grid.cols), static_cast<int>(e.idx % grid.cols)};
    for (int k = 0; k < 8; ++k) {
      const Cell nb{c.row + kDr[k], c.col + kDc[k]};
      if (grid.is_blocked(nb)) continue;
      if (k >= 4 && !cut_corners && (grid.is_blocked({c.row + kDr[k], c.col}) || grid.is_blocked({c.row, c.col + kDc[k]})))
        continue;
      const std::size_t ni = grid.index(nb);
      if (closed[ni]) continue;
      const double step = k < 4 ? 1.0 : std::numbers::sqrt2;
      const double cand = g[e.idx] + step;
      if (cand < g[ni]) {
        g[ni] = cand;
        parent[ni] = static_cast<std::int64_t>(e.idx);
        const double h = heuristic(nb);
        open.push({cand + h, h, ni});
      }
    }
  }

  std::size_t end = goal_idx;
  if (!found) {
    // Whole connected component of the start is closed now; pick the member nearest the goal.
    double best = kInf;
    for (std::size_t i = 0; i < n; ++i) {
      if (!closed[i]) continue;
      const Cell c{static_cast<int>(i / grid.cols), static_cast<int>(i % grid.cols)};
      const double d = heuristic(c);
      if (d < best) best = d, end = i;
    }
  }
  GridPath path;
  path.reached_goal = found;
  path.cost = g[end];
  for (std::int64_t i = static_cast<std::int64_t>(end); i >= 0; i = parent[static_cast<std::size_t>(i)])
    path.cells.push_back({static_cast<int>(i / grid.cols), static_cast<int>(i % grid.cols)});
  std::reverse(path.cells.begin(), path.cells.end());
  return path;
}

}  // namespace lookout
