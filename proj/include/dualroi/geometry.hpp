#pragma once

#include "dualroi/image.hpp"

#include <cstdint>
#include <vector>

namespace dualroi {

/// Reference line in Hough normal form: col*cos(theta) + row*sin(theta) = rho.
struct Line {
  double rho = 0.0;
  double theta_deg = 0.0;

  double distance(double row, double col) const;  // signed, positive on the breast side
};

struct Landmarks {
  int p1 = 0;  // row of the breast front point
  int p2 = 0;  // column where the perpendicular from the front meets the line
  Pixel front;
  Line line;
  bool pectoral = false;  // line came from a Hough fit (MLO)
  bool fallback = false;  // MLO fit failed and the chest border was used
};

/// Otsu threshold on the 16-bit histogram, largest 4-connected component,
/// holes filled. Throws SegmentationError on an empty foreground.
Mask segment_breast(const Raster16& log_pixels);

/// Otsu threshold: foreground is value > threshold.
int otsu_threshold(const Raster16& pixels);

struct HoughOptions {
  double theta_min_deg = 20.0;
  double theta_max_deg = 80.0;
  double gradient_sigma_px = 1.5;
  double edge_fraction = 0.3;    // of the strongest gradient in the region
  double region_fraction = 0.6;  // of the mask bounding box, from the chest-side top corner
  int border_margin_px = 4;      // ignore gradients this close to the mask edge
  int min_votes = 15;
  double refine_band_px = 2.0;
};

struct PectoralFit {
  Line line;
  bool fallback = false;
  int votes = 0;
};

/// Strongest line among gradient pixels of the chest-side upper part of the
/// mask. Falls back to the chest border (mask's first column) when no bin
/// reaches `min_votes`.
PectoralFit fit_pectoral(const RasterD& log_image, const Mask& mask, const HoughOptions& options = {});

/// Vertical line through the mask's chest-side column.
Line chest_border(const Mask& mask);

/// Front point and perpendicular foot for a given mask and reference line.
Landmarks landmarks_from(const Mask& mask, const Line& line);

/// Segments, fits the pectoral line for MLO views and derives (p1, p2).
Landmarks extract_landmarks(const Image& log_image, const HoughOptions& options = {});

struct MappedLocation {
  Pixel source;
  Pixel target;   // q - p + p', unclipped
  Pixel clipped;  // target clamped to the destination image
  bool was_clipped = false;
  std::vector<Pixel> jitter_samples;
};

/// q' = q - p + p' with p = (p1, p2); clipped to rows x cols.
MappedLocation map_location(Pixel q, const Landmarks& src, const Landmarks& dst, int rows, int cols);

/// n draws from N(q', sigma^2 I), rounded and clipped to the image.
std::vector<Pixel> jitter(Pixel q, int n, double sigma_px, std::uint64_t seed, int rows, int cols);

/// Debug rendering: the image with the reference line and both landmarks burned in.
Raster16 landmark_overlay(const Raster16& log_pixels, const Landmarks& lm);

}  // namespace dualroi
