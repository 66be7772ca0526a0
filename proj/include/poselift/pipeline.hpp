#pragma once

// Inference-side orchestration: hypothesis generation, split-conformal
// calibration on ground-truth scores, per-sample prediction with the five
// aggregation modes, and metric evaluation. Used by the CLI subcommands and
// exercised directly by the integration tests.

#include <atomic>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "poselift/aggregate.hpp"
#include "poselift/conformal.hpp"
#include "poselift/diffusion.hpp"
#include "poselift/metrics.hpp"
#include "poselift/scorer.hpp"
#include "poselift/synthkin.hpp"
#include "poselift/trainer.hpp"

namespace poselift::pipeline {

enum class AggMode { NaiveMean, CpWeightedMean, CpJagg, CpJbest, NaiveJagg };

inline const char* mode_name(AggMode m) {
    switch (m) {
        case AggMode::NaiveMean: return "naive-mean";
        case AggMode::CpWeightedMean: return "cp-weighted-mean";
        case AggMode::CpJagg: return "cp-jagg";
        case AggMode::CpJbest: return "cp-jbest";
        case AggMode::NaiveJagg: return "naive-jagg";
    }
    return "?";
}

inline AggMode mode_from_name(const std::string& s) {
    if (s == "naive-mean") return AggMode::NaiveMean;
    if (s == "cp-weighted-mean") return AggMode::CpWeightedMean;
    if (s == "cp-jagg") return AggMode::CpJagg;
    if (s == "cp-jbest") return AggMode::CpJbest;
    if (s == "naive-jagg") return AggMode::NaiveJagg;
    throw std::invalid_argument("unknown aggregation mode: " + s);
}

inline bool mode_uses_cp(AggMode m) {
    return m == AggMode::CpWeightedMean || m == AggMode::CpJagg || m == AggMode::CpJbest;
}

// H DDIM chains conditioned on x; hypotheses come back in millimeters with
// their conformity scores (computed in the scaled space the model trains in).
inline aggregate::HypothesisBatch generate_hypotheses(const trainer::Model& model, const PoseSeq2D& x, long H,
                                                      long K, std::uint64_t seed, std::uint64_t sample_id) {
    if (H < 1) throw std::invalid_argument("generate_hypotheses: H must be >= 1");
    aggregate::HypothesisBatch batch;
    batch.source_x = x;
    auto denoiser = [&](const std::vector<double>& y_t, const PoseSeq2D& cond, long t) {
        return posenet::denoise_plain(model.den, cond, y_t, t);
    };
    for (long h = 0; h < H; ++h) {
        PoseSeq3D scaled = diffusion::ddim_sample(denoiser, x, K, model.sched,
                                                  rng::derive(seed, "infer.hyp", sample_id, static_cast<std::uint64_t>(h)));
        const double score = scorer::conformity_score_plain(model.den, model.sc, x, scaled.coords);
        for (auto& v : scaled.coords) v *= model.pose_scale_mm;
        batch.push(scaled);
        batch.scores.push_back(score);
    }
    return batch;
}

inline double ground_truth_score(const trainer::Model& model, const synthkin::Sample& s) {
    const std::vector<double> y_scaled = trainer::scale_coords(s.y.coords, model.pose_scale_mm);
    return scorer::conformity_score_plain(model.den, model.sc, s.x, y_scaled);
}

// Ranks the conformity scores of the ground-truth sequences of the
// calibration split.
inline conformal::CalibrationResult calibrate_model(const trainer::Model& model,
                                                    const std::vector<synthkin::Sample>& calibration,
                                                    double alpha) {
    if (calibration.empty()) throw std::invalid_argument("calibrate_model: empty calibration split");
    std::vector<double> scores;
    scores.reserve(calibration.size());
    for (const auto& s : calibration) scores.push_back(ground_truth_score(model, s));
    return conformal::calibrate(scores, alpha);
}

struct PredictionRecord {
    long id = 0;
    std::string mode;
    long retained = 0;
    bool fallback = false;
    long jagg_fallback_joints = 0;
    double gt_score = 0.0;
    std::vector<double> hyp_scores;
    std::vector<double> hyp_mpjpe_mm;
    PoseSeq3D pose;  // aggregated output, millimeters
};

inline PredictionRecord predict_sample(const trainer::Model& model, const synthkin::Sample& sample, AggMode mode,
                                       long H, long K, const conformal::CalibrationResult* calib,
                                       std::uint64_t seed) {
    if (mode_uses_cp(mode) && calib == nullptr)
        throw std::invalid_argument("predict_sample: CP aggregation mode requires a calibration result");
    PredictionRecord rec;
    rec.id = sample.id;
    rec.mode = mode_name(mode);
    aggregate::HypothesisBatch batch =
        generate_hypotheses(model, sample.x, H, K, seed, static_cast<std::uint64_t>(sample.id));
    rec.gt_score = ground_truth_score(model, sample);
    rec.hyp_scores = batch.scores;
    rec.hyp_mpjpe_mm.reserve(static_cast<std::size_t>(H));
    for (long h = 0; h < H; ++h) rec.hyp_mpjpe_mm.push_back(metrics::mpjpe(batch.hypothesis(h), sample.y));

    const aggregate::HypothesisBatch* used = &batch;
    conformal::PredictSetResult filtered;
    if (mode_uses_cp(mode)) {
        filtered = conformal::predict_set(batch, *calib);
        used = &filtered.batch;
        rec.fallback = filtered.fallback;
    }
    rec.retained = used->count;
    switch (mode) {
        case AggMode::NaiveMean:
            rec.pose = aggregate::plain_mean(*used);
            break;
        case AggMode::CpWeightedMean:
            rec.pose = aggregate::weighted_mean(*used);
            break;
        case AggMode::CpJagg:
        case AggMode::NaiveJagg: {
            aggregate::JaggResult r = aggregate::j_agg(*used, sample.cam);
            rec.pose = std::move(r.pose);
            rec.jagg_fallback_joints = r.fallback_joints;
            break;
        }
        case AggMode::CpJbest:
            rec.pose = aggregate::j_best(*used, sample.y);
            break;
    }
    return rec;
}

// Runs prediction over a sample list with a small worker pool; results land
// in sample order no matter how many workers run.
inline std::vector<PredictionRecord> predict_run(const trainer::Model& model,
                                                 const std::vector<synthkin::Sample>& samples, AggMode mode, long H,
                                                 long K, const conformal::CalibrationResult* calib,
                                                 std::uint64_t seed, long jobs = 1) {
    std::vector<PredictionRecord> out(samples.size());
    if (samples.empty()) return out;
    jobs = std::max(1L, std::min(jobs, static_cast<long>(samples.size())));
    if (jobs == 1) {
        for (std::size_t i = 0; i < samples.size(); ++i)
            out[i] = predict_sample(model, samples[i], mode, H, K, calib, seed);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (long w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            try {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= samples.size()) return;
                    out[i] = predict_sample(model, samples[i], mode, H, K, calib, seed);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
    return out;
}

inline void save_predictions(const std::string& path, const std::vector<PredictionRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_predictions: cannot open " + path);
    for (const auto& r : records) {
        nlohmann::json j{{"id", r.id},
                         {"mode", r.mode},
                         {"retained", r.retained},
                         {"fallback", r.fallback},
                         {"jagg_fallback_joints", r.jagg_fallback_joints},
                         {"gt_score", r.gt_score},
                         {"hyp_scores", r.hyp_scores},
                         {"hyp_mpjpe_mm", r.hyp_mpjpe_mm},
                         {"frames", r.pose.frames},
                         {"joints", r.pose.joints},
                         {"pose", synthkin::detail::base64_encode(r.pose.coords)}};
        os << j.dump() << '\n';
    }
    if (!os) throw std::runtime_error("save_predictions: write failed: " + path);
}

inline std::vector<PredictionRecord> load_predictions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_predictions: cannot open " + path);
    std::vector<PredictionRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PredictionRecord r;
        r.id = j.at("id").get<long>();
        r.mode = j.at("mode").get<std::string>();
        r.retained = j.at("retained").get<long>();
        r.fallback = j.at("fallback").get<bool>();
        r.jagg_fallback_joints = j.at("jagg_fallback_joints").get<long>();
        r.gt_score = j.at("gt_score").get<double>();
        r.hyp_scores = j.at("hyp_scores").get<std::vector<double>>();
        r.hyp_mpjpe_mm = j.at("hyp_mpjpe_mm").get<std::vector<double>>();
        r.pose = PoseSeq3D(j.at("frames").get<long>(), j.at("joints").get<long>(),
                           synthkin::detail::base64_decode(j.at("pose").get<std::string>()));
        out.push_back(std::move(r));
    }
    return out;
}

struct EvaluationResult {
    metrics::MetricsReport report;
    std::map<std::string, double> mpjpe_by_family;
};

inline EvaluationResult evaluate_predictions(const std::vector<PredictionRecord>& records,
                                             const synthkin::DatasetSplit& data,
                                             const conformal::CalibrationResult* calib) {
    if (records.empty()) throw std::invalid_argument("evaluate_predictions: no prediction records");
    std::map<long, const synthkin::Sample*> by_id;
    for (const auto& s : data.train) by_id[s.id] = &s;
    for (const auto& s : data.calibration) by_id[s.id] = &s;
    for (const auto& s : data.test) by_id[s.id] = &s;

    EvaluationResult out;
    double mpjpe_acc = 0.0, pmpjpe_acc = 0.0, pck_acc = 0.0, auc_acc = 0.0, set_acc = 0.0;
    long covered = 0;
    std::map<std::string, std::pair<double, long>> family_acc;
    std::vector<std::pair<double, double>> score_error_pairs;
    for (const auto& r : records) {
        auto it = by_id.find(r.id);
        if (it == by_id.end())
            throw std::runtime_error("evaluate_predictions: sample id " + std::to_string(r.id) +
                                     " not found in dataset");
        const synthkin::Sample& s = *it->second;
        const double e = metrics::mpjpe(r.pose, s.y);
        mpjpe_acc += e;
        pmpjpe_acc += metrics::p_mpjpe(r.pose, s.y);
        pck_acc += metrics::pck(r.pose, s.y, 150.0);
        auc_acc += metrics::auc(r.pose, s.y);
        set_acc += static_cast<double>(r.retained);
        if (calib && r.gt_score >= calib->tau) ++covered;
        auto& fam = family_acc[synthkin::family_name(s.family)];
        fam.first += e;
        fam.second += 1;
        for (std::size_t h = 0; h < r.hyp_scores.size() && h < r.hyp_mpjpe_mm.size(); ++h)
            score_error_pairs.emplace_back(r.hyp_scores[h], r.hyp_mpjpe_mm[h]);
    }
    const double n = static_cast<double>(records.size());
    out.report.mpjpe_mm = mpjpe_acc / n;
    out.report.p_mpjpe_mm = pmpjpe_acc / n;
    out.report.pck_percent = pck_acc / n;
    out.report.auc_percent = auc_acc / n;
    out.report.mean_set_size = set_acc / n;
    out.report.coverage = calib ? static_cast<double>(covered) / n : -1.0;
    out.report.sample_count = static_cast<long>(records.size());
    if (score_error_pairs.size() >= 3) {
        try {
            const auto study = metrics::score_error_study(score_error_pairs);
            out.report.pearson_r = study.pearson_r;
            out.report.ols_r2 = study.ols_r2;
        } catch (const std::invalid_argument&) {
            out.report.pearson_r = 0.0;  // zero-variance degenerate scores
            out.report.ols_r2 = 0.0;
        }
    }
    for (const auto& [name, acc] : family_acc) out.mpjpe_by_family[name] = acc.first / static_cast<double>(acc.second);
    return out;
}

inline nlohmann::json evaluation_to_json(const EvaluationResult& ev) {
    nlohmann::json j = metrics::to_json(ev.report);
    nlohmann::json fam;
    for (const auto& [name, v] : ev.mpjpe_by_family) fam[name] = v;
    j["mpjpe_by_family"] = fam;
    return j;
}

}  // namespace poselift::pipeline
