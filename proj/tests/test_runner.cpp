#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "diode/runner.hpp"

using namespace diode;

namespace {

// small-but-real configuration: full pipeline in a couple of seconds
ExperimentConfig tinyConfig(const std::string& method, uint64_t dataSeed = 5) {
    ExperimentConfig c;
    c.scene.seed = dataSeed;
    c.step_sizes = {4, 2, 2};
    c.train_per_step = 6;
    c.test_size = 6;
    c.data_seed = dataSeed;
    c.method = method;
    c.iterations = 12;
    c.batch_size = 1;
    c.fisher_samples = 4;
    c.detector.channels = 8;
    c.detector.tower_depth = 1;
    c.seeds = {1};
    return c;
}

TaskProtocol protocolFor(const ExperimentConfig& c) {
    return buildProtocol(c.scene, c.step_sizes, c.train_per_step, c.test_size, c.data_seed);
}

}  // namespace

TEST_CASE("method matrix composes exactly") {
    const MethodSpec ft = resolveMethod("finetune");
    const MethodSpec ftp = resolveMethod("finetune+pseudo");
    const MethodSpec oewc = resolveMethod("online-ewc");
    const MethodSpec cewc = resolveMethod("constrained-ewc");
    const MethodSpec diode = resolveMethod("diode");

    // finetune+pseudo differs from finetune only in pseudo
    CHECK(ft.pseudo == false);
    CHECK(ftp.pseudo == true);
    CHECK(ft.penalty == ftp.penalty);
    CHECK(ft.constrainedMask == ftp.constrainedMask);
    CHECK(ft.expansion == ftp.expansion);

    // constrained-ewc differs from online-ewc only in the mask
    CHECK(oewc.pseudo == cewc.pseudo);
    CHECK(oewc.penalty == cewc.penalty);
    CHECK(oewc.expansion == cewc.expansion);
    CHECK(oewc.constrainedMask == false);
    CHECK(cewc.constrainedMask == true);

    // diode differs from constrained-ewc only in expansion
    CHECK(diode.pseudo == cewc.pseudo);
    CHECK(diode.penalty == cewc.penalty);
    CHECK(diode.constrainedMask == cewc.constrainedMask);
    CHECK(diode.expansion == true);
    CHECK(cewc.expansion == false);

    CHECK(resolveMethod("ewc").penalty == MethodSpec::Penalty::EwcPerTask);
    CHECK(resolveMethod("mas").penalty == MethodSpec::Penalty::Mas);
    CHECK(resolveMethod("incdet-huber").penalty == MethodSpec::Penalty::IncdetHuber);
    CHECK_THROWS_AS(resolveMethod("lwf"), ConfigError);
}

TEST_CASE("experiment config json round trip and overrides") {
    const nlohmann::json j = {{"method", "constrained-ewc"},
                              {"lambda", 50.0},
                              {"iterations", 123},
                              {"step_sizes", {2, 2, 2, 2}},
                              {"pseudo", false},
                              {"detector", {{"channels", 16}}},
                              {"scene", {{"seed", 42}, {"noise_level", 5}}}};
    const ExperimentConfig c = experimentFromJson(j);
    CHECK(c.method == "constrained-ewc");
    CHECK(c.lambda == 50.0);
    CHECK(c.iterations == 123);
    CHECK(c.step_sizes == std::vector<int>{2, 2, 2, 2});
    CHECK(c.detector.channels == 16);
    CHECK(c.scene.noise_level == 5);
    CHECK(c.methodSpec().pseudo == false);  // override applied
    // defaults survive
    CHECK(c.learning_rate == 0.01);
    CHECK(c.explosion_grad_norm == 1e6);
    CHECK(c.clip_threshold == 1e4);
}

TEST_CASE("degenerate single-step protocol: all methods reduce to plain training") {
    ExperimentConfig c = tinyConfig("finetune");
    c.step_sizes = {8};
    const TaskProtocol proto = protocolFor(c);
    std::vector<std::string> methods = {"finetune", "finetune+pseudo", "constrained-ewc", "diode"};
    std::vector<std::string> digests;
    for (const auto& name : methods) {
        ExperimentConfig mc = c;
        mc.method = name;
        mc.lambda = name == "finetune" || name == "finetune+pseudo" ? 0.0 : 10.0;
        ProtocolRunner runner(mc, proto);
        RunRecord r = runner.run(3);
        REQUIRE(r.steps.size() == 1);
        // strip method/lambda fields: compare the metric payloads
        nlohmann::json j = r.toJson(false);
        j.erase("method");
        j.erase("lambda");
        digests.push_back(j.dump());
    }
    for (size_t i = 1; i < digests.size(); ++i) CHECK(digests[i] == digests[0]);
}

TEST_CASE("full tiny run: step structure, parameter accounting, reproducibility") {
    const ExperimentConfig c = tinyConfig("diode");
    const TaskProtocol proto = protocolFor(c);
    ProtocolRunner runner(c, proto);
    const RunRecord a = runner.runWithLambda(11, 1.0);
    REQUIRE(a.steps.size() == 3);
    CHECK(a.steps[0].added_params == 0);
    CHECK(a.steps[1].added_params == 9 * 8 * 2 + 2);               // head only
    CHECK(a.steps[2].added_params == 3 * (8 * 8 + 8) + 9 * 8 * 2 + 2);  // adapters + head
    const auto growth = countAddedParams(c.detector, c.step_sizes, 1);
    CHECK(a.steps[1].added_params == growth[0].added);
    CHECK(a.steps[2].added_params == growth[1].added);

    // identical (config, seed) -> identical metrics, bitwise
    ProtocolRunner runner2(c, proto);
    const RunRecord b = runner2.runWithLambda(11, 1.0);
    CHECK(a.metricsDigest() == b.metricsDigest());

    // different seed diverges
    const RunRecord d = runner.runWithLambda(12, 1.0);
    CHECK(a.metricsDigest() != d.metricsDigest());
}

TEST_CASE("lambda = 0 is trajectory-identical to the corresponding non-EWC baseline") {
    const ExperimentConfig base = tinyConfig("finetune+pseudo", 17);
    const TaskProtocol proto = protocolFor(base);

    ExperimentConfig ewcCfg = base;
    ewcCfg.method = "constrained-ewc";

    ProtocolRunner ftRunner(base, proto);
    ProtocolRunner ewcRunner(ewcCfg, proto);
    const RunRecord ft = ftRunner.runWithLambda(4, 0.0);
    const RunRecord ewc = ewcRunner.runWithLambda(4, 0.0);

    REQUIRE(ft.steps.size() == ewc.steps.size());
    for (size_t s = 0; s < ft.steps.size(); ++s) {
        CHECK(ft.steps[s].eval.map50 == ewc.steps[s].eval.map50);
        CHECK(ft.steps[s].eval.map5095 == ewc.steps[s].eval.map5095);
        for (const auto& [cls, aps] : ft.steps[s].eval.perClassAp) {
            const auto& other = ewc.steps[s].eval.perClassAp.at(cls);
            for (size_t t = 0; t < aps.size(); ++t) CHECK(aps[t] == other[t]);
        }
    }
}

TEST_CASE("generic lambdaSearch honors the probe verdicts") {
    CHECK_THROWS_AS(lambdaSearch({}, [](double) { return true; }), UsageError);

    // grid [0] -> 0, nothing can explode at zero penalty
    bool none = false;
    CHECK(lambdaSearch({0.0}, [](double) { return true; }, &none) == 0.0);
    CHECK(none);

    // analytic fixture: explosion iff lambda * F * |delta| > bound
    const double F = 1e12, delta = 1e-7, bound = 1e6;
    const auto probe = [&](double lambda) { return lambda * F * delta <= bound; };
    CHECK(lambdaSearch({1.0, 1e6, 1e12}, probe) == 1.0);

    // all explode -> explosion signal
    CHECK_THROWS_AS(lambdaSearch({1e6, 1e12}, probe), ExplosionSignal);

    // none explode -> largest grid value, flagged
    none = false;
    CHECK(lambdaSearch({1.0, 2.0, 4.0}, [](double) { return true; }, &none) == 4.0);
    CHECK(none);
}

TEST_CASE("protocol-level lambda search returns a grid member and caps instability") {
    ExperimentConfig c = tinyConfig("constrained-ewc", 23);
    c.step_sizes = {4, 4};
    const TaskProtocol proto = protocolFor(c);
    ProtocolRunner runner(c, proto);
    const auto result = runner.lambdaSearch({0.0, 1.0, 1e3}, 2);
    const std::vector<double> grid = {0.0, 1.0, 1e3};
    CHECK(std::find(grid.begin(), grid.end(), result.lambda) != grid.end());
    // probes are recorded largest-first until the first stable value
    REQUIRE(!result.probes.empty());
    CHECK(result.probes.back().second == true);
}

TEST_CASE("emitReport aggregates means and rejects mixed protocols") {
    const ExperimentConfig c = tinyConfig("finetune", 29);
    const TaskProtocol proto = protocolFor(c);
    ProtocolRunner runner(c, proto);
    std::vector<RunRecord> records;
    for (uint64_t seed : {1, 2, 3}) records.push_back(runner.runWithLambda(seed, 0.0));

    const ReportTables tables = emitReport(records);
    CHECK(tables.mapCsv.find("finetune") != std::string::npos);
    const auto& steps = tables.combined.at("methods").at("finetune").at("map50");
    REQUIRE(steps.size() == 3);
    double manual = 0.0;
    for (const auto& r : records) manual += r.steps.back().eval.map50;
    manual /= 3.0;
    CHECK(steps[2].at("mean").get<double>() == doctest::Approx(manual).epsilon(1e-12));
    CHECK(steps[2].at("n").get<int>() == 3);

    // single record -> one method row
    const ReportTables single = emitReport({records[0]});
    CHECK(single.combined.at("methods").size() == 1);

    // mixed protocols rejected
    ExperimentConfig other = c;
    other.data_seed = 99;
    other.scene.seed = 99;
    ProtocolRunner otherRunner(other, protocolFor(other));
    RunRecord alien = otherRunner.runWithLambda(1, 0.0);
    std::vector<RunRecord> mixed = {records[0], alien};
    CHECK_THROWS_AS(emitReport(mixed), UsageError);
}

TEST_CASE("run record json round trip") {
    const ExperimentConfig c = tinyConfig("finetune+pseudo", 31);
    ProtocolRunner runner(c, protocolFor(c));
    const RunRecord r = runner.runWithLambda(6, 0.0);
    const RunRecord back = runRecordFromJson(r.toJson());
    CHECK(back.metricsDigest() == r.metricsDigest());
}

TEST_CASE("dataset disk round trip preserves the protocol") {
    const ExperimentConfig c = tinyConfig("finetune", 37);
    const TaskProtocol proto = protocolFor(c);
    const std::string dir =
        (std::filesystem::temp_directory_path() / "diode_ds_test").string();
    std::filesystem::remove_all(dir);
    writeProtocol(proto, dir);
    const TaskProtocol loaded = readProtocol(dir);
    std::filesystem::remove_all(dir);

    REQUIRE(loaded.numSteps() == proto.numSteps());
    CHECK(loaded.stepSizes == proto.stepSizes);
    for (int s = 0; s < proto.numSteps(); ++s) {
        REQUIRE(loaded.trainSteps[s].samples.size() == proto.trainSteps[s].samples.size());
        for (size_t i = 0; i < proto.trainSteps[s].samples.size(); ++i) {
            const auto& a = proto.trainSteps[s].samples[i];
            const auto& b = loaded.trainSteps[s].samples[i];
            CHECK(a.image.data == b.image.data);
            REQUIRE(a.boxes.size() == b.boxes.size());
            for (size_t k = 0; k < a.boxes.size(); ++k) {
                CHECK(a.boxes[k].x1 == b.boxes[k].x1);
                CHECK(a.boxes[k].class_id == b.boxes[k].class_id);
            }
        }
        // full annotations kept separately and unmasked
        REQUIRE(loaded.trainFull[s].samples.size() == proto.trainFull[s].samples.size());
        for (size_t i = 0; i < proto.trainFull[s].samples.size(); ++i)
            CHECK(loaded.trainFull[s].samples[i].boxes.size() ==
                  proto.trainFull[s].samples[i].boxes.size());
    }
    CHECK(loaded.test.samples.size() == proto.test.samples.size());
}
