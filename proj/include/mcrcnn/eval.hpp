#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mcrcnn/dataset.hpp"
#include "mcrcnn/image_io.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  std::int64_t included() const { return tp + tn + fp + fn; }
};

struct Metrics {
  double precision = 0.0, recall = 0.0, fmeasure = 0.0, pwc = 0.0;
};

// Pixel -> 1 iff probability >= threshold; rejects thresholds outside [0,1].
Tensor<float> binarize(const Tensor<float>& prob, double threshold);

// Confusion counts of one binary mask against one label raster. Foreground
// truth is code 255; background truth is codes 0 and 50; codes 85 and 170
// are excluded from all four counts. Unknown codes are rejected with the
// offending pixel coordinates.
ConfusionCounts accumulate_confusion(const Tensor<float>& binary_mask, const ImageU8& gt);

double fmeasure(double precision, double recall);

// precision = TP/(TP+FP), recall = TP/(TP+FN), fmeasure = harmonic mean,
// pwc = 100*(FN+FP)/total. When TP+FP+FN == 0 there was nothing to find and
// nothing found: precision, recall, and fmeasure are 1. Otherwise a zero
// denominator yields 0 for that metric; pwc of an all-excluded frame is 0.
Metrics compute_metrics(const ConfusionCounts& c);

// Decision threshold per CD2014 category name; every unlisted category uses
// the 0.7 default.
double threshold_for_category(const std::string& category);

struct VideoResult {
  std::string category, video;
  int frames = 0;  // frames that contributed counts
  ConfusionCounts counts;
  Metrics metrics;
  double threshold = 0.7;
};

struct CategoryResult {
  std::string category;
  int videos = 0;
  Metrics means;
};

struct Report {
  std::vector<VideoResult> videos;          // sorted by (category, video)
  std::vector<CategoryResult> categories;   // sorted by category
  Metrics overall;
};

// Counts are summed per video before metrics; a category averages its
// videos' metrics; the overall row averages the category means. Rejects an
// empty input or videos with no evaluated frames in total.
Report aggregate_report(std::vector<VideoResult> videos);

// One row per video: category, video, frames, TP, TN, FP, FN, precision,
// recall, fmeasure, pwc, threshold.
std::string report_csv(const Report& r);
// Human-readable nested summary, including the aggregation protocol note.
std::string report_text(const Report& r);

// Scores the stored probability maps of one sequence: for every ground-truth
// frame inside the temporal range (and inside `frame_filter`, when given),
// reads `<prob_dir>/prob%06d.png`, thresholds it, and accumulates confusion
// counts.
VideoResult evaluate_video(const FrameSequence& seq, const std::string& prob_dir,
                           double threshold,
                           const std::optional<std::set<int>>& frame_filter = std::nullopt);

}  // namespace mcrcnn
