#include "htc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace htc {

namespace {

struct ScoredFlag {
  double score;
  int image_id;
  int order;  // original index, deterministic tie-break
  bool tp;
  bool ignored;
};

}  // namespace

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

ScaleBuckets make_scale_buckets(int image_size) {
  const double f = (static_cast<double>(image_size) / 640.0) * (static_cast<double>(image_size) / 640.0);
  ScaleBuckets b;
  b.all = {0.0, std::numeric_limits<double>::infinity()};
  b.small = {0.0, 32.0 * 32.0 * f};
  b.medium = {32.0 * 32.0 * f, 96.0 * 96.0 * f};
  b.large = {96.0 * 96.0 * f, std::numeric_limits<double>::infinity()};
  return b;
}

double average_precision(const std::vector<EvalDetection>& detections,
                         const std::vector<EvalGroundTruth>& ground_truths, const PairIouFn& iou_fn,
                         const std::vector<double>& iou_thresholds, const AreaRange& area_range,
                         int max_dets) {
  std::set<int> class_set;
  for (const auto& g : ground_truths) class_set.insert(g.category_id);

  auto in_range = [&](double a) { return a >= area_range.lo && a < area_range.hi; };

  double ap_sum = 0.0;
  int ap_count = 0;
  for (int cls : class_set) {
    // Is there any non-ignored GT of this class in the range?
    int64_t npig = 0;
    std::set<int> image_set;
    for (const auto& g : ground_truths)
      if (g.category_id == cls) {
        image_set.insert(g.image_id);
        if (in_range(g.area)) ++npig;
      }
    for (const auto& d : detections)
      if (d.category_id == cls) image_set.insert(d.image_id);
    if (npig == 0) continue;

    for (double thr : iou_thresholds) {
      std::vector<ScoredFlag> flags;
      for (int img : image_set) {
        std::vector<int> det_idx, gt_idx;
        for (size_t i = 0; i < detections.size(); ++i)
          if (detections[i].category_id == cls && detections[i].image_id == img)
            det_idx.push_back(static_cast<int>(i));
        for (size_t i = 0; i < ground_truths.size(); ++i)
          if (ground_truths[i].category_id == cls && ground_truths[i].image_id == img)
            gt_idx.push_back(static_cast<int>(i));

        std::stable_sort(det_idx.begin(), det_idx.end(), [&](int a, int b) {
          return detections[static_cast<size_t>(a)].score > detections[static_cast<size_t>(b)].score;
        });
        if (static_cast<int>(det_idx.size()) > max_dets) det_idx.resize(static_cast<size_t>(max_dets));

        std::vector<char> gt_matched(gt_idx.size(), 0);
        for (int di : det_idx) {
          const auto& det = detections[static_cast<size_t>(di)];
          int best_g = -1;
          double best_iou = -1.0;
          bool best_ignored = true;
          for (size_t k = 0; k < gt_idx.size(); ++k) {
            if (gt_matched[k]) continue;
            const auto& gt = ground_truths[static_cast<size_t>(gt_idx[k])];
            const bool gt_ignored = !in_range(gt.area);
            const double v = iou_fn(det, gt);
            if (v < thr) continue;
            // prefer any non-ignored GT over ignored ones; otherwise higher IoU
            if (best_g >= 0) {
              if (!best_ignored && gt_ignored) continue;
              if (best_ignored == gt_ignored && v <= best_iou) continue;
            }
            best_g = static_cast<int>(k);
            best_iou = v;
            best_ignored = gt_ignored;
          }
          ScoredFlag f;
          f.score = det.score;
          f.image_id = det.image_id;
          f.order = di;
          if (best_g >= 0) {
            gt_matched[static_cast<size_t>(best_g)] = 1;
            f.tp = !best_ignored;
            f.ignored = best_ignored;
          } else {
            f.tp = false;
            f.ignored = !in_range(det.area);
          }
          flags.push_back(f);
        }
      }

      std::sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        return a.order < b.order;
      });

      std::vector<double> precision, recall;
      int64_t tp = 0, fp = 0;
      for (const auto& f : flags) {
        if (f.ignored) continue;
        if (f.tp)
          ++tp;
        else
          ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(npig));
      }
      // precision envelope (monotone non-increasing from the right)
      for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[static_cast<size_t>(i)] =
            std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i + 1)]);

      double ap = 0.0;
      size_t idx = 0;
      for (int ri = 0; ri <= 100; ++ri) {
        const double r = ri / 100.0;
        while (idx < recall.size() && recall[idx] < r) ++idx;
        if (idx < precision.size()) ap += precision[idx];
      }
      ap /= 101.0;
      ap_sum += ap;
      ++ap_count;
    }
  }
  if (ap_count == 0) return -1.0;
  return ap_sum / ap_count;
}

EvalResult evaluate_detections(const std::vector<EvalDetection>& detections,
                               const std::vector<EvalGroundTruth>& ground_truths,
                               const PairIouFn& iou_fn, int image_size, int max_dets) {
  const ScaleBuckets buckets = make_scale_buckets(image_size);
  EvalResult r;
  r.ap = average_precision(detections, ground_truths, iou_fn, coco_iou_thresholds(), buckets.all,
                           max_dets);
  r.ap50 = average_precision(detections, ground_truths, iou_fn, {0.5}, buckets.all, max_dets);
  r.ap75 = average_precision(detections, ground_truths, iou_fn, {0.75}, buckets.all, max_dets);
  r.ap_s = average_precision(detections, ground_truths, iou_fn, coco_iou_thresholds(),
                             buckets.small, max_dets);
  r.ap_m = average_precision(detections, ground_truths, iou_fn, coco_iou_thresholds(),
                             buckets.medium, max_dets);
  r.ap_l = average_precision(detections, ground_truths, iou_fn, coco_iou_thresholds(),
                             buckets.large, max_dets);
  return r;
}

}  // namespace htc
