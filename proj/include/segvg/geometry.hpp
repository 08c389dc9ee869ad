#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "segvg/tensor.hpp"

namespace segvg {

/// Normalized center-size box; all fields are fractions of the image extent.
struct BoxCCWH {
  double cx = 0, cy = 0, w = 0, h = 0;
};

/// Normalized corner box with x0 <= x1, y0 <= y1.
struct BoxXYXY {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

inline BoxXYXY ccwh_to_xyxy(const BoxCCWH& b) {
  BoxXYXY r;
  r.x0 = std::clamp(b.cx - b.w / 2, 0.0, 1.0);
  r.y0 = std::clamp(b.cy - b.h / 2, 0.0, 1.0);
  r.x1 = std::clamp(b.cx + b.w / 2, 0.0, 1.0);
  r.y1 = std::clamp(b.cy + b.h / 2, 0.0, 1.0);
  return r;
}

inline BoxCCWH xyxy_to_ccwh(const BoxXYXY& b) {
  BoxCCWH r;
  r.cx = (b.x0 + b.x1) / 2;
  r.cy = (b.y0 + b.y1) / 2;
  r.w = b.x1 - b.x0;
  r.h = b.y1 - b.y0;
  return r;
}

/// Intersection over union; 0 for disjoint boxes and for a zero-area union.
inline double iou(const BoxXYXY& a, const BoxXYXY& b) {
  double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  double inter = std::max(0.0, iw) * std::max(0.0, ih);
  double area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
  double area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
  double uni = area_a + area_b - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

inline double iou_ccwh(const BoxCCWH& a, const BoxCCWH& b) {
  return iou(ccwh_to_xyxy(a), ccwh_to_xyxy(b));
}

/// 1 - GIoU of a differentiable predicted box [cx, cy, w, h] against a fixed
/// ground truth. Corners are not clipped here so gradients keep pushing
/// out-of-range predictions back; hull and union areas are floored at 1e-7.
template <typename T>
Tensor<T> giou_loss(const Tensor<T>& pred, const BoxCCWH& gt) {
  if (pred.size() != 4)
    throw std::invalid_argument("giou_loss: pred must be a 4-vector, got " + shape_str(pred.shape()));
  Shape s = pred.shape();
  Tensor<T> p = pred.rank() == 1 ? pred : reshape(pred, {4});
  Tensor<T> half = Tensor<T>::scalar(T(0.5));
  Tensor<T> cx = slice(p, 0, 0, 1), cy = slice(p, 0, 1, 1), w = slice(p, 0, 2, 1), h = slice(p, 0, 3, 1);
  Tensor<T> px0 = cx - w * half, px1 = cx + w * half;
  Tensor<T> py0 = cy - h * half, py1 = cy + h * half;

  auto c = [](double v) { return Tensor<T>::scalar(static_cast<T>(v)); };
  Tensor<T> gx0 = c(gt.cx - gt.w / 2), gx1 = c(gt.cx + gt.w / 2);
  Tensor<T> gy0 = c(gt.cy - gt.h / 2), gy1 = c(gt.cy + gt.h / 2);

  Tensor<T> iw = relu(minimum(px1, gx1) - maximum(px0, gx0));
  Tensor<T> ih = relu(minimum(py1, gy1) - maximum(py0, gy0));
  Tensor<T> inter = iw * ih;
  Tensor<T> area_p = w * h;
  Tensor<T> area_g = c(gt.w * gt.h);
  Tensor<T> uni = area_p + area_g - inter;
  Tensor<T> uni_safe = clamp(uni, T(1e-7), T(8));

  Tensor<T> hw = maximum(px1, gx1) - minimum(px0, gx0);
  Tensor<T> hh = maximum(py1, gy1) - minimum(py0, gy0);
  Tensor<T> hull = hw * hh;
  Tensor<T> hull_safe = clamp(hull, T(1e-7), T(8));

  Tensor<T> giou = inter / uni_safe - (hull - uni) / hull_safe;
  return c(1.0) - giou;
}

/// Binary foreground mask on the feature grid, produced from a box.
struct SegTarget {
  int hf = 0, wf = 0;
  std::vector<std::uint8_t> mask;  // row-major, 1 = foreground

  int foreground_count() const {
    int n = 0;
    for (auto v : mask) n += v;
    return n;
  }
};

/// Rasterizes a box to the Hf x Wf grid: cell (i, j) is foreground iff its
/// center lies inside the closed box rectangle. A box so thin that no cell
/// center falls inside promotes the single nearest cell instead of emitting
/// an empty target.
inline SegTarget bbox2seg(const BoxCCWH& gt, int hf, int wf) {
  if (hf < 1 || wf < 1) throw std::invalid_argument("bbox2seg: grid extents must be >= 1");
  BoxXYXY b = ccwh_to_xyxy(gt);
  SegTarget t;
  t.hf = hf;
  t.wf = wf;
  t.mask.assign(static_cast<std::size_t>(hf) * wf, 0);
  int count = 0;
  for (int i = 0; i < hf; ++i) {
    double cy = (i + 0.5) / hf;
    for (int j = 0; j < wf; ++j) {
      double cx = (j + 0.5) / wf;
      if (cx >= b.x0 && cx <= b.x1 && cy >= b.y0 && cy <= b.y1) {
        t.mask[static_cast<std::size_t>(i) * wf + j] = 1;
        ++count;
      }
    }
  }
  if (count == 0) {
    double bx = (b.x0 + b.x1) / 2, by = (b.y0 + b.y1) / 2;
    int bi = 0, bj = 0;
    double best = 1e30;
    for (int i = 0; i < hf; ++i)
      for (int j = 0; j < wf; ++j) {
        double dx = (j + 0.5) / wf - bx, dy = (i + 0.5) / hf - by;
        double d2 = dx * dx + dy * dy;
        if (d2 < best) {
          best = d2;
          bi = i;
          bj = j;
        }
      }
    t.mask[static_cast<std::size_t>(bi) * wf + bj] = 1;
  }
  return t;
}

/// Plain-text PGM (P2) dump of a probability grid, values scaled to 0-255.
inline void write_pgm(const std::string& path, const std::vector<double>& probs, int hf, int wf) {
  if (static_cast<std::size_t>(hf) * wf != probs.size())
    throw std::invalid_argument("write_pgm: grid size mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P2\n" << wf << ' ' << hf << "\n255\n";
  for (int i = 0; i < hf; ++i) {
    for (int j = 0; j < wf; ++j) {
      int v = static_cast<int>(std::lround(std::clamp(probs[static_cast<std::size_t>(i) * wf + j], 0.0, 1.0) * 255.0));
      os << v << (j + 1 == wf ? '\n' : ' ');
    }
  }
}

}  // namespace segvg
