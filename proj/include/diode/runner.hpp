#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "diode/common.hpp"
#include "diode/continual.hpp"
#include "diode/data.hpp"
#include "diode/dataset_io.hpp"
#include "diode/detector.hpp"
#include "diode/dilation.hpp"
#include "diode/eval.hpp"
#include "diode/pseudo.hpp"

namespace diode {

// ---- method matrix ----
// Methods compose from four flags; neighbouring rows of the ablation
// differ by exactly one flag (constrained-ewc vs online-ewc: the mask;
// diode vs constrained-ewc: expansion).

struct MethodSpec {
    enum class Penalty { None, EwcPerTask, EwcOnline, Mas, IncdetHuber };
    std::string name;
    bool pseudo = false;
    Penalty penalty = Penalty::None;
    bool constrainedMask = false;
    bool expansion = false;
};

inline MethodSpec resolveMethod(const std::string& name) {
    MethodSpec m;
    m.name = name;
    using P = MethodSpec::Penalty;
    if (name == "finetune") {
        m.pseudo = false;
    } else if (name == "finetune+pseudo") {
        m.pseudo = true;
    } else if (name == "ewc") {
        m.pseudo = true;
        m.penalty = P::EwcPerTask;
    } else if (name == "online-ewc") {
        m.pseudo = true;
        m.penalty = P::EwcOnline;
    } else if (name == "mas") {
        m.pseudo = true;
        m.penalty = P::Mas;
    } else if (name == "incdet-huber") {
        m.pseudo = true;
        m.penalty = P::IncdetHuber;
    } else if (name == "constrained-ewc") {
        m.pseudo = true;
        m.penalty = P::EwcOnline;
        m.constrainedMask = true;
    } else if (name == "diode") {
        m.pseudo = true;
        m.penalty = P::EwcOnline;
        m.constrainedMask = true;
        m.expansion = true;
    } else {
        throw ConfigError("unknown method: " + name);
    }
    return m;
}

// ---- experiment configuration ----

struct ExperimentConfig {
    SceneSpec scene;
    std::vector<int> step_sizes = {4, 2, 2};
    int train_per_step = 64;
    int test_size = 64;
    uint64_t data_seed = 7;

    std::string method = "diode";
    std::optional<bool> pseudo_override;

    double lambda = 0.0;
    std::vector<double> lambda_grid;  // non-empty -> search before the run
    double learning_rate = 0.01;
    int iterations = 2000;
    int batch_size = 2;
    bool scale_iters_by_classes = false;

    int fisher_samples = 256;
    bool pseudo_in_fisher = true;
    double pseudo_conf = 0.5;
    double pseudo_nms = 0.5;
    double explosion_grad_norm = 1e6;
    double clip_threshold = 1e4;
    double probe_fraction = 0.1;
    double update_clip_norm = 10.0;

    std::vector<uint64_t> seeds = {1, 2, 3};
    DetectorConfig detector;

    MethodSpec methodSpec() const {
        MethodSpec m = resolveMethod(method);
        if (pseudo_override) m.pseudo = *pseudo_override;
        return m;
    }

    int iterationsForStep(int step) const {
        if (!scale_iters_by_classes || step_sizes.empty()) return iterations;
        const double ratio = static_cast<double>(step_sizes[static_cast<size_t>(step)]) /
                             static_cast<double>(step_sizes[0]);
        return std::max(1, static_cast<int>(std::lround(iterations * ratio)));
    }

    // everything that defines the protocol; reports refuse to mix digests
    std::string protocolDigest() const {
        Fnv1a h;
        for (int s : step_sizes) h.f64(s);
        h.f64(static_cast<double>(train_per_step));
        h.f64(static_cast<double>(test_size));
        h.f64(static_cast<double>(data_seed));
        h.f64(static_cast<double>(scene.seed));
        h.f64(scene.num_classes);
        h.f64(scene.noise_level);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(h.value()));
        return buf;
    }
};

inline ExperimentConfig experimentFromJson(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("scene")) c.scene = dataset_io::sceneSpecFromJson(j.at("scene"));
    c.step_sizes = j.value("step_sizes", c.step_sizes);
    c.train_per_step = j.value("train_per_step", c.train_per_step);
    c.test_size = j.value("test_size", c.test_size);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.method = j.value("method", c.method);
    if (j.contains("pseudo")) c.pseudo_override = j.at("pseudo").get<bool>();
    c.lambda = j.value("lambda", c.lambda);
    c.lambda_grid = j.value("lambda_grid", c.lambda_grid);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.scale_iters_by_classes = j.value("scale_iters_by_classes", c.scale_iters_by_classes);
    c.fisher_samples = j.value("fisher_samples", c.fisher_samples);
    c.pseudo_in_fisher = j.value("pseudo_in_fisher", c.pseudo_in_fisher);
    c.pseudo_conf = j.value("pseudo_conf", c.pseudo_conf);
    c.pseudo_nms = j.value("pseudo_nms", c.pseudo_nms);
    c.explosion_grad_norm = j.value("explosion_grad_norm", c.explosion_grad_norm);
    c.clip_threshold = j.value("clip_threshold", c.clip_threshold);
    c.probe_fraction = j.value("probe_fraction", c.probe_fraction);
    c.update_clip_norm = j.value("update_clip_norm", c.update_clip_norm);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("detector")) {
        const auto& d = j.at("detector");
        c.detector.image_size = d.value("image_size", c.detector.image_size);
        c.detector.channels = d.value("channels", c.detector.channels);
        c.detector.tower_depth = d.value("tower_depth", c.detector.tower_depth);
        if (d.contains("strides")) c.detector.strides = d.at("strides").get<std::vector<int>>();
        if (d.contains("level_size_limits")) {
            c.detector.level_size_limits = d.at("level_size_limits").get<std::vector<double>>();
            c.detector.level_size_limits.back() = std::numeric_limits<double>::infinity();
        }
    }
    c.detector.image_size = c.scene.image_size;
    return c;
}

// ---- run records ----

struct StepRecord {
    int step = 0;
    double lambda_used = 0.0;
    EvalResult eval;
    double map50_seen = 0.0;
    int64_t added_params = 0;
    double cumulative_ratio = 0.0;
    int explosions = 0;
    double seconds = 0.0;
};

struct RunRecord {
    std::string method;
    uint64_t seed = 0;
    std::vector<int> step_sizes;
    std::string protocol_digest;
    double lambda_used = 0.0;
    std::vector<StepRecord> steps;
    uint64_t final_param_hash = 0;
    double total_seconds = 0.0;

    nlohmann::json toJson(bool includeTiming = true) const {
        nlohmann::json steps_json = nlohmann::json::array();
        for (const auto& s : steps) {
            nlohmann::json per_class;
            for (const auto& [cls, aps] : s.eval.perClassAp)
                per_class[std::to_string(cls)] = aps;
            nlohmann::json js = {{"step", s.step},
                                 {"lambda_used", s.lambda_used},
                                 {"map50", s.eval.map50},
                                 {"map5095", s.eval.map5095},
                                 {"per_class_ap", std::move(per_class)},
                                 {"thresholds", s.eval.thresholds},
                                 {"added_params", s.added_params},
                                 {"cumulative_ratio", s.cumulative_ratio},
                                 {"explosions", s.explosions}};
            if (includeTiming) js["seconds"] = s.seconds;
            steps_json.push_back(std::move(js));
        }
        nlohmann::json j = {{"method", method},
                            {"seed", seed},
                            {"step_sizes", step_sizes},
                            {"protocol_digest", protocol_digest},
                            {"lambda", lambda_used},
                            {"final_param_hash", final_param_hash},
                            {"steps", std::move(steps_json)}};
        if (includeTiming) j["total_seconds"] = total_seconds;
        return j;
    }

    // reproducibility comparisons exclude wall time
    std::string metricsDigest() const { return toJson(false).dump(); }
};

inline RunRecord runRecordFromJson(const nlohmann::json& j) {
    RunRecord r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.step_sizes = j.at("step_sizes").get<std::vector<int>>();
    r.protocol_digest = j.value("protocol_digest", "");
    r.lambda_used = j.value("lambda", 0.0);
    r.final_param_hash = j.value("final_param_hash", uint64_t{0});
    for (const auto& js : j.at("steps")) {
        StepRecord s;
        s.step = js.at("step").get<int>();
        s.lambda_used = js.value("lambda_used", 0.0);
        s.eval.map50 = js.at("map50").get<double>();
        s.eval.map5095 = js.at("map5095").get<double>();
        s.eval.thresholds = js.value("thresholds", std::vector<double>{});
        if (js.contains("per_class_ap"))
            for (const auto& [cls, aps] : js.at("per_class_ap").items())
                s.eval.perClassAp[std::stoi(cls)] = aps.get<std::vector<double>>();
        s.map50_seen = s.eval.map50;
        s.added_params = js.value("added_params", int64_t{0});
        s.cumulative_ratio = js.value("cumulative_ratio", 0.0);
        s.explosions = js.value("explosions", 0);
        s.seconds = js.value("seconds", 0.0);
        r.steps.push_back(std::move(s));
    }
    r.total_seconds = j.value("total_seconds", 0.0);
    return r;
}

// ---- training engine ----

namespace runner_detail {

struct PenaltyState {
    // online accumulation (online-ewc, mas, incdet, constrained, diode)
    ImportanceMatrix accumulated;
    std::optional<Snapshot> latest;
    // per-task anchors (classic ewc)
    std::vector<std::pair<ImportanceMatrix, Snapshot>> perTask;
};

struct TrainStepSetup {
    std::vector<Sample> samples;  // annotations already merged
    std::set<std::string> frozen;
    MethodSpec method;
    double lambda = 0.0;
    double clip = 0.0;
    const PenaltyState* state = nullptr;
    bool applyPenalty = false;
    // applied-update bound; the explosion signal checks the raw norm
    // first, so large-lambda instability is still observable
    double update_clip_norm = 10.0;
};

// One SGD training pass. Throws ExplosionSignal on instability.
inline void trainOneStep(Model& model, const TrainStepSetup& setup, int iterations, double lr,
                         int batch, double explosionNorm, Rng& rng) {
    if (setup.samples.empty()) throw UsageError("trainOneStep: no samples");
    const auto tasks = model.allTasks();

    std::vector<TargetMap> targets;
    targets.reserve(setup.samples.size());
    for (const auto& s : setup.samples) targets.push_back(assignTargets(s.boxes, model.config));

    const int decayPoint = static_cast<int>(0.75 * iterations);
    const int warmup = std::max(1, iterations / 20);
    for (int iter = 0; iter < iterations; ++iter) {
        double lrNow = iter >= decayPoint ? lr * 0.1 : lr;
        if (iter < warmup) lrNow *= static_cast<double>(iter + 1) / warmup;
        model.params.zeroGrads();
        Tape tape;
        Tape::Var loss = tape.scalarConst(0.0);
        for (int b = 0; b < batch; ++b) {
            const int idx = rng.uniformInt(0, static_cast<int>(setup.samples.size()) - 1);
            const RawOutputs out =
                forward(model, tape, setup.samples[static_cast<size_t>(idx)].image, tasks,
                        ParamMode::Tracked);
            loss = tape.add(loss,
                            detectionLoss(model, tape, out, targets[static_cast<size_t>(idx)]));
        }
        loss = tape.mulScalar(loss, 1.0 / batch);

        if (setup.applyPenalty && setup.lambda > 0.0 && setup.state) {
            using P = MethodSpec::Penalty;
            const PenaltyState& st = *setup.state;
            if (setup.method.penalty == P::EwcPerTask) {
                for (const auto& [imp, snap] : st.perTask) {
                    const GroupMask mask = setup.method.constrainedMask ? GroupMask::constrained()
                                                                        : GroupMask::allOf(snap);
                    loss = tape.add(loss, ewcPenalty(tape, model.params, snap, imp, setup.lambda,
                                                     mask));
                }
            } else if (setup.method.penalty == P::IncdetHuber) {
                loss = tape.add(loss, huberClippedPenalty(tape, model.params, *st.latest,
                                                          st.accumulated, setup.lambda,
                                                          setup.clip));
            } else if (setup.method.penalty != P::None) {
                const GroupMask mask = setup.method.constrainedMask
                                           ? GroupMask::constrained()
                                           : GroupMask::allOf(*st.latest);
                loss = tape.add(loss, ewcPenalty(tape, model.params, *st.latest, st.accumulated,
                                                 setup.lambda, mask));
            }
        }

        const double lossValue = tape.scalarVal(loss);
        if (!std::isfinite(lossValue)) throw ExplosionSignal("loss", "non-finite training loss");
        tape.backward(loss);
        const double norm = gradL2Norm(model.params, setup.frozen);
        if (std::getenv("DIODE_TRACE") && (iter % 100 == 0 || norm > 100)) {
            Fnv1a h;
            for (const auto& [name, p] : model.params)
                for (double v : p.tensor.data) h.f64(v);
            std::fprintf(stderr, "[trace] iter %d loss %.9f norm %.3f lr %.5f hash %016llx\n",
                         iter, lossValue, norm, lrNow,
                         static_cast<unsigned long long>(h.value()));
        }
        if (!std::isfinite(norm) || norm > explosionNorm)
            throw ExplosionSignal("grad-norm", "global gradient norm " + std::to_string(norm));
        if (setup.update_clip_norm > 0 && norm > setup.update_clip_norm) {
            const double scale = setup.update_clip_norm / norm;
            for (auto& [name, p] : model.params)
                for (auto& g : p.tensor.grad) g *= scale;
        }
        sgdStep(model.params, lrNow, setup.frozen);
    }
}

}  // namespace runner_detail

// ---- protocol runner ----

class ProtocolRunner {
public:
    ProtocolRunner(const ExperimentConfig& config, const TaskProtocol& protocol)
        : config_(config), protocol_(protocol) {
        if (protocol_.numSteps() == 0) throw ConfigError("empty protocol");
        config_.detector.validate();
    }

    // Caches pseudo annotations per (step, image) for inspection and
    // for writing the cache files.
    const std::vector<std::vector<std::vector<BBox>>>& pseudoCache() const { return pseudoCache_; }

    RunRecord run(uint64_t seed) {
        const MethodSpec method = config_.methodSpec();
        double lambda = config_.lambda;
        if (!config_.lambda_grid.empty() && method.penalty != MethodSpec::Penalty::None)
            lambda = lambdaSearch(config_.lambda_grid, seed).lambda;
        return runWithLambda(seed, lambda);
    }

    struct LambdaSearchResult {
        double lambda = 0.0;
        bool noneExploded = false;
        std::vector<std::pair<double, bool>> probes;  // (lambda, stable)
    };

    // Probes a short run of the first incremental step at each grid
    // value, largest first; the result is the largest grid lambda whose
    // probe does not trigger the explosion signal.
    LambdaSearchResult lambdaSearch(const std::vector<double>& grid, uint64_t seed) {
        if (grid.empty()) throw UsageError("lambdaSearch: empty grid");
        std::vector<double> sorted = grid;
        std::sort(sorted.begin(), sorted.end());
        if (protocol_.numSteps() < 2)
            throw UsageError("lambdaSearch: protocol has no incremental step");

        // train step 0 once; every probe restarts from this state
        const MethodSpec method = config_.methodSpec();
        pseudoCache_.assign(static_cast<size_t>(protocol_.numSteps()), {});
        StepContext ctx = freshContext(seed);
        executeStep(ctx, 0, method, 0.0);

        const int probeIters =
            std::max(1, static_cast<int>(std::lround(config_.probe_fraction *
                                                     config_.iterationsForStep(1))));
        LambdaSearchResult result;
        double found = -1.0;
        for (auto it = sorted.rbegin(); it != sorted.rend(); ++it) {
            const double lambda = *it;
            StepContext probe = ctx;  // deep copy of model + state
            bool stable = true;
            try {
                executeStep(probe, 1, method, lambda, probeIters, /*evaluate=*/false);
            } catch (const ExplosionSignal&) {
                stable = false;
            }
            result.probes.emplace_back(lambda, stable);
            if (stable) {
                found = lambda;
                break;
            }
        }
        if (found < 0.0) throw ExplosionSignal("lambda-search", "every grid value exploded");
        result.lambda = found;
        result.noneExploded = found == sorted.back();
        return result;
    }

    RunRecord runWithLambda(uint64_t seed, double lambda) {
        const auto start = std::chrono::steady_clock::now();
        const MethodSpec method = config_.methodSpec();
        RunRecord record;
        record.method = method.name;
        record.seed = seed;
        record.step_sizes = protocol_.stepSizes;
        record.protocol_digest = config_.protocolDigest();
        record.lambda_used = lambda;

        pseudoCache_.assign(static_cast<size_t>(protocol_.numSteps()), {});
        StepContext ctx = freshContext(seed);
        const int64_t baseParams = ctx.model.params.totalElements();

        for (int step = 0; step < protocol_.numSteps(); ++step) {
            const auto stepStart = std::chrono::steady_clock::now();
            const int64_t beforeParams = ctx.model.params.totalElements();
            executeStep(ctx, step, method, lambda);

            StepRecord sr;
            sr.step = step;
            sr.lambda_used = step == 0 ? 0.0 : lambda;
            sr.added_params = ctx.model.params.totalElements() - beforeParams;
            sr.cumulative_ratio =
                static_cast<double>(ctx.model.params.totalElements() - baseParams) /
                static_cast<double>(baseParams);
            sr.eval = evaluateModel(ctx.model, protocol_.test,
                                    protocol_.classesSeenThrough(step));
            sr.map50_seen = sr.eval.map50;
            sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                       stepStart)
                             .count();
            record.steps.push_back(std::move(sr));
        }
        {
            Fnv1a h;
            for (const auto& [name, p] : ctx.model.params) {
                h.str(name);
                for (double v : p.tensor.data) h.f64(v);
            }
            record.final_param_hash = h.value();
        }
        record.total_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return record;
    }

private:
    struct StepContext {
        Model model;
        runner_detail::PenaltyState state;
        uint64_t seed = 0;
    };

    ExperimentConfig config_;
    TaskProtocol protocol_;
    std::vector<std::vector<std::vector<BBox>>> pseudoCache_;

    StepContext freshContext(uint64_t seed) {
        StepContext ctx;
        ctx.seed = seed;
        Rng initRng(mixSeed(seed, 0xD10DE0));
        ctx.model = buildModel(config_.detector, protocol_.stepSizes[0], initRng);
        return ctx;
    }

    // Runs one protocol step end to end: pseudo labels, expansion,
    // policy, training, snapshot + importance accumulation.
    void executeStep(StepContext& ctx, int step, const MethodSpec& method, double lambda,
                     int overrideIters = -1, bool evaluate = true) {
        (void)evaluate;
        const auto& masked = protocol_.trainSteps[static_cast<size_t>(step)].samples;

        // (a) pseudo annotations from the frozen end-of-previous-step model
        std::vector<Sample> merged = masked;
        if (step > 0 && method.pseudo) {
            auto& cache = pseudoCache_[static_cast<size_t>(step)];
            cache.clear();
            for (auto& sample : merged) {
                const std::vector<BBox> pseudo = generatePseudo(
                    ctx.model, sample.image, config_.pseudo_conf, config_.pseudo_nms);
                cache.push_back(pseudo);
                sample.boxes = mergeAnnotations(sample.boxes, pseudo, sample.id).combined();
            }
        }

        // (b) expansion: every method gets the new head; only expanding
        // methods get adapters (from the second incremental step)
        if (step > 0) {
            Rng headRng(mixSeed(ctx.seed, 0x5EED + static_cast<uint64_t>(step)));
            const int newClasses = protocol_.stepSizes[static_cast<size_t>(step)];
            if (method.expansion)
                expandModel(ctx.model, step, newClasses, headRng);
            else
                addClassificationHead(ctx.model, step, newClasses, headRng);
        }

        // (c) trainability policy
        const TrainabilityPolicy policy = buildTrainabilityPolicy(step, ctx.model.numTasks());

        // (d) train
        runner_detail::TrainStepSetup setup;
        setup.samples = std::move(merged);
        setup.frozen = policy.frozenTags();
        setup.method = method;
        setup.lambda = lambda;
        setup.clip = config_.clip_threshold;
        setup.state = &ctx.state;
        setup.applyPenalty = step > 0 && method.penalty != MethodSpec::Penalty::None &&
                             ctx.state.latest.has_value();
        setup.update_clip_norm = config_.update_clip_norm;
        Rng trainRng(mixSeed(ctx.seed, 0xBA7C4 + static_cast<uint64_t>(step)));
        const int iters = overrideIters > 0 ? overrideIters : config_.iterationsForStep(step);
        runner_detail::trainOneStep(ctx.model, setup, iters, config_.learning_rate,
                                    config_.batch_size, config_.explosion_grad_norm, trainRng);

        // (e) snapshot + importance accumulation for penalty methods
        if (method.penalty != MethodSpec::Penalty::None) {
            Snapshot snap = Snapshot::of(ctx.model.params);
            const std::vector<Sample>& fisherData =
                config_.pseudo_in_fisher ? setup.samples
                                         : protocol_.trainSteps[static_cast<size_t>(step)].samples;
            const int n = std::min<int>(config_.fisher_samples,
                                        static_cast<int>(fisherData.size()));
            ImportanceMatrix imp = method.penalty == MethodSpec::Penalty::Mas
                                       ? masImportance(ctx.model, fisherData, n)
                                       : fisherImportance(ctx.model, fisherData, n);
            if (method.penalty == MethodSpec::Penalty::EwcPerTask) {
                ctx.state.perTask.emplace_back(std::move(imp), std::move(snap));
            } else {
                ctx.state.accumulated = accumulateImportance(ctx.state.accumulated, imp);
                ctx.state.latest = std::move(snap);
            }
        }
    }
};

// Generic probe-driven variant used by fixtures and the CLI: returns
// the largest grid value whose probe reports stability.
inline double lambdaSearch(const std::vector<double>& grid,
                           const std::function<bool(double)>& probeStable,
                           bool* noneExploded = nullptr) {
    if (grid.empty()) throw UsageError("lambdaSearch: empty grid");
    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    for (auto it = sorted.rbegin(); it != sorted.rend(); ++it) {
        if (probeStable(*it)) {
            if (noneExploded) *noneExploded = *it == sorted.back();
            return *it;
        }
    }
    throw ExplosionSignal("lambda-search", "every grid value exploded");
}

// ---- reports ----

struct ReportTables {
    nlohmann::json combined;
    std::string mapCsv;
    std::string forgettingCsv;
    std::string paramGrowthCsv;
};

namespace runner_detail {

struct Stat {
    double mean = 0.0, stddev = 0.0;
    int n = 0;
};

inline Stat meanStd(const std::vector<double>& xs) {
    Stat s;
    s.n = static_cast<int>(xs.size());
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= xs.size();
    for (double x : xs) s.stddev += (x - s.mean) * (x - s.mean);
    s.stddev = xs.size() > 1 ? std::sqrt(s.stddev / (xs.size() - 1)) : 0.0;
    return s;
}

// mean AP@0.5 of one step's classes as recorded at evaluation `at`
inline double stepClassesAp(const RunRecord& r, int classesOfStep, int at) {
    int lo = 0;
    for (int s = 0; s < classesOfStep; ++s) lo += r.step_sizes[static_cast<size_t>(s)];
    const int hi = lo + r.step_sizes[static_cast<size_t>(classesOfStep)];
    const auto& eval = r.steps[static_cast<size_t>(at)].eval;
    double acc = 0.0;
    int n = 0;
    for (int c = lo; c < hi; ++c) {
        auto it = eval.perClassAp.find(c);
        if (it != eval.perClassAp.end() && !it->second.empty()) {
            acc += it->second.front();
            ++n;
        }
    }
    return n > 0 ? acc / n : 0.0;
}

}  // namespace runner_detail

// Aggregates runs sharing a protocol into the per-step mAP table, the
// forgetting table, and the parameter-growth table.
inline ReportTables emitReport(const std::vector<RunRecord>& records) {
    if (records.empty()) throw UsageError("emitReport: no records");
    const auto& digest = records.front().protocol_digest;
    const auto& stepSizes = records.front().step_sizes;
    for (const auto& r : records) {
        if (r.protocol_digest != digest || r.step_sizes != stepSizes)
            throw UsageError("emitReport: records stem from different protocols");
    }
    const int numSteps = static_cast<int>(stepSizes.size());

    // method -> step -> values over seeds
    std::map<std::string, std::vector<std::vector<double>>> map50;
    std::map<std::string, std::vector<std::vector<double>>> growth;
    std::map<std::string, std::map<int, std::vector<double>>> forgetting;
    for (const auto& r : records) {
        auto& rows = map50[r.method];
        auto& grows = growth[r.method];
        rows.resize(static_cast<size_t>(numSteps));
        grows.resize(static_cast<size_t>(numSteps));
        for (const auto& s : r.steps) {
            rows[static_cast<size_t>(s.step)].push_back(s.eval.map50);
            grows[static_cast<size_t>(s.step)].push_back(s.cumulative_ratio);
        }
        // forgetting of each earlier step's classes at the final step
        for (int p = 0; p + 1 < numSteps; ++p) {
            const double own = runner_detail::stepClassesAp(r, p, p);
            const double last = runner_detail::stepClassesAp(r, p, numSteps - 1);
            forgetting[r.method][p].push_back(own - last);
        }
    }

    ReportTables out;
    std::string csv = "method";
    for (int s = 0; s < numSteps; ++s) csv += ",step_" + std::to_string(s);
    csv += "\n";
    nlohmann::json methodsJson;
    for (const auto& [method, rows] : map50) {
        csv += method;
        nlohmann::json stepsJson = nlohmann::json::array();
        for (const auto& vals : rows) {
            const auto st = runner_detail::meanStd(vals);
            char cell[64];
            std::snprintf(cell, sizeof(cell), ",%.4f±%.4f", st.mean, st.stddev);
            csv += cell;
            stepsJson.push_back({{"mean", st.mean}, {"std", st.stddev}, {"n", st.n}});
        }
        csv += "\n";
        methodsJson[method]["map50"] = std::move(stepsJson);
    }
    out.mapCsv = csv;

    std::string fcsv = "method,classes_of_step,ap_drop_mean,ap_drop_std\n";
    for (const auto& [method, perStep] : forgetting)
        for (const auto& [p, vals] : perStep) {
            const auto st = runner_detail::meanStd(vals);
            char line[128];
            std::snprintf(line, sizeof(line), "%s,%d,%.4f,%.4f\n", method.c_str(), p, st.mean,
                          st.stddev);
            fcsv += line;
            methodsJson[method]["forgetting"][std::to_string(p)] = {{"mean", st.mean},
                                                                    {"std", st.stddev}};
        }
    out.forgettingCsv = fcsv;

    std::string gcsv = "method";
    for (int s = 0; s < numSteps; ++s) gcsv += ",cumulative_ratio_step_" + std::to_string(s);
    gcsv += "\n";
    for (const auto& [method, grows] : growth) {
        gcsv += method;
        nlohmann::json growthJson = nlohmann::json::array();
        for (const auto& vals : grows) {
            const auto st = runner_detail::meanStd(vals);
            char cell[48];
            std::snprintf(cell, sizeof(cell), ",%.6f", st.mean);
            gcsv += cell;
            growthJson.push_back(st.mean);
        }
        gcsv += "\n";
        methodsJson[method]["cumulative_growth"] = std::move(growthJson);
    }
    out.paramGrowthCsv = gcsv;

    out.combined = {{"protocol_digest", digest},
                    {"step_sizes", stepSizes},
                    {"methods", std::move(methodsJson)}};
    return out;
}

}  // namespace diode
