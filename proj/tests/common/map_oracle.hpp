#pragma once

#include "analysis.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <random>
#include <vector>

// Average precision by exhaustive enumeration, written independently of
// evaluate_map. For each class every partial one-to-one matching between
// detections and same-image ground truth is enumerated; the one kept is the
// matching in which each detection, taken by descending score, holds the
// highest-IoU ground truth not held by an earlier detection (IoU >= thr).
// AP is then sum over j of (1/n) * max{precision_k : recall_k >= j/n}.
namespace snnconv::oracle {

struct Item {
    std::size_t image;
    std::size_t order;  // position in that image's prediction list
    Detection det;
};

inline std::optional<double> class_ap(const std::vector<std::vector<Detection>>& preds,
                                      const std::vector<std::vector<GroundTruth>>& gt, std::size_t cls,
                                      double thr) {
    std::vector<std::pair<std::size_t, Box>> truths;
    for (std::size_t i = 0; i < gt.size(); ++i)
        for (const auto& g : gt[i])
            if (g.class_id == cls) truths.emplace_back(i, g.box);
    if (truths.empty()) return std::nullopt;

    std::vector<Item> dets;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t k = 0; k < preds[i].size(); ++k)
            if (preds[i][k].class_id == cls) dets.push_back({i, k, preds[i][k]});
    std::stable_sort(dets.begin(), dets.end(), [](const Item& a, const Item& b) {
        if (a.det.score != b.det.score) return a.det.score > b.det.score;
        if (a.image != b.image) return a.image < b.image;
        return a.order < b.order;
    });

    const std::size_t n = dets.size(), m = truths.size();
    auto ok = [&](std::size_t d, std::size_t t) {
        return truths[t].first == dets[d].image && iou(dets[d].det.box, truths[t].second) >= thr;
    };
    // Admissibility of a complete matching (-1 = unmatched).
    auto admissible = [&](const std::vector<int>& match) {
        std::vector<bool> held(m, false);
        for (std::size_t d = 0; d < n; ++d) {
            int best = -1;
            double best_iou = -1.0;
            for (std::size_t t = 0; t < m; ++t) {
                if (held[t] || !ok(d, t)) continue;
                const double v = iou(dets[d].det.box, truths[t].second);
                if (v > best_iou) best_iou = v, best = int(t);
            }
            if (match[d] != best) return false;
            if (best >= 0) held[std::size_t(best)] = true;
        }
        return true;
    };

    std::vector<std::vector<int>> admissible_matchings;
    std::vector<int> match(n, -1);
    std::vector<bool> used(m, false);
    std::function<void(std::size_t)> rec = [&](std::size_t d) {
        if (d == n) {
            if (admissible(match)) admissible_matchings.push_back(match);
            return;
        }
        match[d] = -1;
        rec(d + 1);
        for (std::size_t t = 0; t < m; ++t) {
            if (used[t] || !ok(d, t)) continue;
            used[t] = true;
            match[d] = int(t);
            rec(d + 1);
            used[t] = false;
            match[d] = -1;
        }
    };
    rec(0);
    if (admissible_matchings.size() != 1) return -1.0;  // signals a broken oracle

    const auto& chosen = admissible_matchings.front();
    std::vector<double> precision(n), recall(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += chosen[k] >= 0;
        precision[k] = double(tp) / double(k + 1);
        recall[k] = double(tp) / double(m);
    }
    double ap = 0.0;
    for (std::size_t j = 1; j <= m; ++j) {
        const double level = double(j) / double(m);
        double best = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            if (recall[k] >= level - 1e-12) best = std::max(best, precision[k]);
        ap += best / double(m);
    }
    return ap;
}

struct Instance {
    std::vector<std::vector<Detection>> preds;
    std::vector<std::vector<GroundTruth>> gt;
    std::size_t num_classes = 1;
};

// At most 3 detections and 2 ground-truth boxes per class per image.
inline Instance random_instance(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Instance inst;
    inst.num_classes = 1 + rng() % 3;
    const std::size_t images = 1 + rng() % 2;
    inst.preds.resize(images);
    inst.gt.resize(images);
    std::size_t index = 0;
    for (std::size_t i = 0; i < images; ++i) {
        for (std::size_t c = 0; c < inst.num_classes; ++c) {
            std::vector<Box> boxes;
            const std::size_t ngt = rng() % 3;
            for (std::size_t g = 0; g < ngt; ++g) {
                const double x = 10 * u(rng), y = 10 * u(rng), w = 2 + 4 * u(rng), h = 2 + 4 * u(rng);
                boxes.push_back({x, y, x + w, y + h});
                inst.gt[i].push_back({boxes.back(), c});
            }
            const std::size_t nd = rng() % 4;
            for (std::size_t d = 0; d < nd; ++d) {
                Box b;
                if (!boxes.empty() && u(rng) < 0.75) {
                    const Box& g = boxes[rng() % boxes.size()];
                    const double j = 0.6 * (u(rng) - 0.5);
                    b = {g.x_min + j, g.y_min + 0.8 * j, g.x_max + 0.5 * j, g.y_max - 0.7 * j};
                } else {
                    const double x = 10 * u(rng), y = 10 * u(rng);
                    b = {x, y, x + 2 + 4 * u(rng), y + 2 + 4 * u(rng)};
                }
                inst.preds[i].push_back({b, c, u(rng), index++});
            }
        }
    }
    return inst;
}

} // namespace snnconv::oracle
