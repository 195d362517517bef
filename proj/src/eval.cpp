#include "mcrcnn/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "mcrcnn/errors.hpp"

namespace fs = std::filesystem;

namespace mcrcnn {

Tensor<float> binarize(const Tensor<float>& prob, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) {
    throw ConfigError("binarization threshold must lie in [0,1], got " +
                      std::to_string(threshold));
  }
  Tensor<float> out(prob.shape());
  const auto t = static_cast<float>(threshold);
  out.array() = (prob.array() >= t).cast<float>();
  return out;
}

ConfusionCounts accumulate_confusion(const Tensor<float>& binary_mask, const ImageU8& gt) {
  const Shape s = binary_mask.shape();
  if (s.n != 1 || s.c != 1) {
    throw ShapeError("confusion accounting expects a [1,1,H,W] mask, got " + s.str());
  }
  if (gt.channels != 1 || gt.height != s.h || gt.width != s.w) {
    throw ShapeError("mask " + s.str() + " does not match ground truth " +
                     std::to_string(gt.width) + "x" + std::to_string(gt.height) + "x" +
                     std::to_string(gt.channels));
  }

  ConfusionCounts c;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const std::uint8_t code = gt.at(y, x);
      if (code == gtcode::kOutsideRoi || code == gtcode::kUnknown) continue;
      const bool truth_fg = code == gtcode::kForeground;
      if (!truth_fg && code != gtcode::kBackground && code != gtcode::kShadow) {
        throw IoError("unknown ground-truth code " + std::to_string(code) + " at pixel (" +
                      std::to_string(y) + "," + std::to_string(x) + ")");
      }
      const bool pred_fg = binary_mask.at(0, 0, y, x) >= 0.5f;
      if (truth_fg) {
        (pred_fg ? c.tp : c.fn) += 1;
      } else {
        (pred_fg ? c.fp : c.tn) += 1;
      }
    }
  }
  return c;
}

double fmeasure(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * recall * precision / denom : 0.0;
}

Metrics compute_metrics(const ConfusionCounts& c) {
  Metrics m;
  if (c.tp + c.fp + c.fn == 0) {
    // Nothing to find and nothing found: perfect agreement by convention.
    m.precision = m.recall = m.fmeasure = 1.0;
    m.pwc = 0.0;
    return m;
  }
  const auto tp = static_cast<double>(c.tp);
  m.precision = c.tp + c.fp > 0 ? tp / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn > 0 ? tp / static_cast<double>(c.tp + c.fn) : 0.0;
  m.fmeasure = fmeasure(m.precision, m.recall);
  const std::int64_t total = c.included();
  m.pwc = total > 0 ? 100.0 * static_cast<double>(c.fn + c.fp) / static_cast<double>(total) : 0.0;
  return m;
}

double threshold_for_category(const std::string& category) {
  if (category == "badWeather") return 0.8;
  if (category == "dynamicBackground") return 0.9;
  if (category == "intermittentObjectMotion") return 0.6;
  if (category == "nightVideos") return 0.9;
  return 0.7;
}

Report aggregate_report(std::vector<VideoResult> videos) {
  if (videos.empty()) {
    throw ConfigError("cannot aggregate an empty result set");
  }
  std::int64_t evaluated = 0;
  for (auto& v : videos) {
    v.metrics = compute_metrics(v.counts);
    evaluated += v.frames;
  }
  if (evaluated == 0) {
    throw ConfigError("no frames were evaluated in any video");
  }
  std::sort(videos.begin(), videos.end(), [](const VideoResult& a, const VideoResult& b) {
    return a.category != b.category ? a.category < b.category : a.video < b.video;
  });

  Report r;
  r.videos = std::move(videos);

  std::map<std::string, CategoryResult> cats;
  for (const auto& v : r.videos) {
    auto& c = cats[v.category];
    c.category = v.category;
    c.videos += 1;
    c.means.precision += v.metrics.precision;
    c.means.recall += v.metrics.recall;
    c.means.fmeasure += v.metrics.fmeasure;
    c.means.pwc += v.metrics.pwc;
  }
  for (auto& [name, c] : cats) {
    const auto n = static_cast<double>(c.videos);
    c.means.precision /= n;
    c.means.recall /= n;
    c.means.fmeasure /= n;
    c.means.pwc /= n;
    r.categories.push_back(c);
    r.overall.precision += c.means.precision;
    r.overall.recall += c.means.recall;
    r.overall.fmeasure += c.means.fmeasure;
    r.overall.pwc += c.means.pwc;
  }
  const auto nc = static_cast<double>(r.categories.size());
  r.overall.precision /= nc;
  r.overall.recall /= nc;
  r.overall.fmeasure /= nc;
  r.overall.pwc /= nc;
  return r;
}

std::string report_csv(const Report& r) {
  std::ostringstream out;
  out << "category,video,frames,TP,TN,FP,FN,precision,recall,fmeasure,pwc,threshold\n";
  char buf[160];
  for (const auto& v : r.videos) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.2f", v.metrics.precision,
                  v.metrics.recall, v.metrics.fmeasure, v.metrics.pwc, v.threshold);
    out << v.category << ',' << v.video << ',' << v.frames << ',' << v.counts.tp << ','
        << v.counts.tn << ',' << v.counts.fp << ',' << v.counts.fn << ',' << buf << '\n';
  }
  return out.str();
}

std::string report_text(const Report& r) {
  std::ostringstream out;
  char buf[200];
  out << "Scene-change evaluation report\n"
      << "(protocol: confusion counts are summed per video before metrics; a\n"
      << " category averages its videos' metrics; overall averages categories)\n\n";
  for (const auto& c : r.categories) {
    std::snprintf(buf, sizeof(buf),
                  "category %-28s videos %2d  P %.4f  R %.4f  F %.4f  PWC %.4f\n",
                  c.category.c_str(), c.videos, c.means.precision, c.means.recall,
                  c.means.fmeasure, c.means.pwc);
    out << buf;
    for (const auto& v : r.videos) {
      if (v.category != c.category) continue;
      std::snprintf(buf, sizeof(buf),
                    "  %-30s frames %4d  P %.4f  R %.4f  F %.4f  PWC %.4f  thr %.2f\n",
                    v.video.c_str(), v.frames, v.metrics.precision, v.metrics.recall,
                    v.metrics.fmeasure, v.metrics.pwc, v.threshold);
      out << buf;
    }
  }
  std::snprintf(buf, sizeof(buf), "\noverall  P %.4f  R %.4f  F %.4f  PWC %.4f\n",
                r.overall.precision, r.overall.recall, r.overall.fmeasure, r.overall.pwc);
  out << buf;
  return out.str();
}

VideoResult evaluate_video(const FrameSequence& seq, const std::string& prob_dir,
                           double threshold,
                           const std::optional<std::set<int>>& frame_filter) {
  if (!seq.has_ground_truth()) {
    throw ConfigError("sequence " + seq.root() + " has no ground truth to evaluate against");
  }
  if (threshold < 0.0 || threshold > 1.0) {
    throw ConfigError("binarization threshold must lie in [0,1], got " +
                      std::to_string(threshold));
  }

  VideoResult v;
  v.category = seq.category();
  v.video = seq.video();
  v.threshold = threshold;

  char name[32];
  for (int i = 0; i < seq.frames(); ++i) {
    if (!seq.in_roi(i)) continue;
    if (frame_filter && frame_filter->count(i) == 0) continue;
    std::snprintf(name, sizeof(name), "prob%06d.png", i + 1);
    const fs::path prob_path = fs::path(prob_dir) / name;
    if (!fs::is_regular_file(prob_path)) {
      throw IoError("missing probability map: " + prob_path.string());
    }
    ImageU8 prob = read_image(prob_path.string());
    if (prob.channels != 1) {
      throw IoError("probability map is not grayscale: " + prob_path.string());
    }
    Tensor<float> pt = image_to_tensor(prob);
    v.counts += accumulate_confusion(binarize(pt, threshold), seq.ground_truth(i));
    v.frames += 1;
  }
  v.metrics = compute_metrics(v.counts);
  return v;
}

}  // namespace mcrcnn
