// Command-line front end: dataset generation, experiment runs, lambda
// search, report emission, and parameter-growth tables.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "diode/dataset_io.hpp"
#include "diode/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json readJson(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw diode::UsageError("cannot read " + path);
    json j;
    is >> j;
    return j;
}

void writeJson(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw diode::UsageError("cannot write " + path);
    os << j.dump(2) << "\n";
}

void writeText(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw diode::UsageError("cannot write " + path);
    os << text;
}

diode::TaskProtocol protocolFor(const diode::ExperimentConfig& config,
                                const std::string& datasetDir) {
    if (!datasetDir.empty()) return diode::readProtocol(datasetDir);
    return diode::buildProtocol(config.scene, config.step_sizes, config.train_per_step,
                                config.test_size, config.data_seed);
}

void writePseudoCache(const diode::ProtocolRunner& runner, const diode::TaskProtocol& proto,
                      const std::string& outDir) {
    const auto& cache = runner.pseudoCache();
    for (size_t s = 0; s < cache.size(); ++s) {
        if (cache[s].empty()) continue;
        json ann = json::array();
        for (size_t i = 0; i < cache[s].size(); ++i) {
            const auto& sample = proto.trainSteps[s].samples[i];
            ann.push_back({{"image", sample.id + ".png"},
                           {"boxes", diode::dataset_io::boxesToJson(cache[s][i], true)}});
        }
        writeJson(outDir + "/pseudo_step_" + std::to_string(s) + ".json", ann);
    }
}

int cmdGenData(const std::string& specPath, const std::string& outDir, uint64_t seedOverride,
               bool hasSeed) {
    const json spec = readJson(specPath);
    diode::SceneSpec scene = spec.contains("scene")
                                 ? diode::dataset_io::sceneSpecFromJson(spec.at("scene"))
                                 : diode::dataset_io::sceneSpecFromJson(spec);
    const auto stepSizes = spec.value("step_sizes", std::vector<int>{4, 2, 2});
    const int trainPerStep = spec.value("train_per_step", 64);
    const int testSize = spec.value("test_size", 64);
    uint64_t seed = spec.value("seed", scene.seed);
    if (hasSeed) seed = seedOverride;
    scene.seed = seed;

    const diode::TaskProtocol proto =
        diode::buildProtocol(scene, stepSizes, trainPerStep, testSize, seed);
    diode::writeProtocol(proto, outDir);
    std::printf("dataset written to %s (%d steps, %d train images/step, %d test images)\n",
                outDir.c_str(), proto.numSteps(), trainPerStep, testSize);
    return 0;
}

int cmdRun(const std::string& configPath, const std::string& datasetDir, const std::string& outDir,
           uint64_t seedOverride, bool hasSeed) {
    diode::ExperimentConfig config = diode::experimentFromJson(readJson(configPath));
    std::vector<uint64_t> seeds = hasSeed ? std::vector<uint64_t>{seedOverride} : config.seeds;
    const diode::TaskProtocol proto = protocolFor(config, datasetDir);
    fs::create_directories(outDir);

    for (uint64_t seed : seeds) {
        diode::ProtocolRunner runner(config, proto);
        const diode::RunRecord record = runner.run(seed);
        const std::string name =
            "run-" + record.method + "-seed" + std::to_string(seed) + ".json";
        writeJson(outDir + "/" + name, record.toJson());
        writePseudoCache(runner, proto, outDir);
        std::printf("%s seed %llu: lambda=%g final mAP@0.5=%.4f (%s)\n", record.method.c_str(),
                    static_cast<unsigned long long>(seed), record.lambda_used,
                    record.steps.back().eval.map50, name.c_str());
    }
    return 0;
}

int cmdLambdaSearch(const std::string& configPath, const std::string& datasetDir,
                    const std::string& outDir, uint64_t seedOverride, bool hasSeed) {
    diode::ExperimentConfig config = diode::experimentFromJson(readJson(configPath));
    if (config.lambda_grid.empty())
        for (int k = 0; k <= 8; ++k) config.lambda_grid.push_back(std::pow(10.0, k));
    const uint64_t seed = hasSeed ? seedOverride : config.seeds.front();
    const diode::TaskProtocol proto = protocolFor(config, datasetDir);

    diode::ProtocolRunner runner(config, proto);
    const auto result = runner.lambdaSearch(config.lambda_grid, seed);
    json probes = json::array();
    for (const auto& [lambda, stable] : result.probes)
        probes.push_back({{"lambda", lambda}, {"stable", stable}});
    const json out = {{"method", config.method},
                      {"seed", seed},
                      {"lambda", result.lambda},
                      {"none_exploded", result.noneExploded},
                      {"probes", probes}};
    if (!outDir.empty()) {
        fs::create_directories(outDir);
        writeJson(outDir + "/lambda_search.json", out);
    }
    std::printf("%s\n", out.dump(2).c_str());
    if (result.noneExploded)
        std::fprintf(stderr, "warning: no grid value exploded; largest grid value returned\n");
    return 0;
}

int cmdReport(const std::string& runsDir, const std::string& outDir) {
    std::vector<diode::RunRecord> records;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(runsDir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("run-", 0) == 0 && entry.path().extension() == ".json")
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) records.push_back(diode::runRecordFromJson(readJson(path)));
    if (records.empty()) throw diode::UsageError("no run-*.json files in " + runsDir);

    const diode::ReportTables tables = diode::emitReport(records);
    const std::string dir = outDir.empty() ? runsDir : outDir;
    fs::create_directories(dir);
    writeText(dir + "/map_table.csv", tables.mapCsv);
    writeText(dir + "/forgetting.csv", tables.forgettingCsv);
    writeText(dir + "/param_growth.csv", tables.paramGrowthCsv);
    writeJson(dir + "/report.json", tables.combined);
    std::printf("%s", tables.mapCsv.c_str());
    std::printf("tables written to %s\n", dir.c_str());
    return 0;
}

int cmdParamTable(const std::string& configPath, const std::string& outDir) {
    const json j = readJson(configPath);
    const int channels = j.value("channels", 32);
    const int levels = j.value("levels", 2);
    const auto classesPerStep = j.value("classes_per_step", std::vector<int>{4, 2, 2});
    int64_t base = j.value("base_params", int64_t{0});
    if (base == 0) {
        diode::DetectorConfig cfg;
        cfg.channels = channels;
        if (j.contains("strides")) cfg.strides = j.at("strides").get<std::vector<int>>();
        if (levels != cfg.numLevels())
            throw diode::ConfigError("param-table: levels does not match strides");
        cfg.level_size_limits.assign(static_cast<size_t>(levels),
                                     std::numeric_limits<double>::infinity());
        for (int l = 0; l + 1 < levels; ++l)
            cfg.level_size_limits[static_cast<size_t>(l)] = 20.0 * (l + 1);
        diode::Rng rng(1);
        base = diode::buildModel(cfg, classesPerStep.at(0), rng).params.totalElements();
    }
    const auto growth = diode::countAddedParams(channels, levels, classesPerStep, base);

    std::string csv = "step,added_params,cumulative_added,cumulative_ratio\n";
    json steps = json::array();
    for (size_t s = 0; s < growth.size(); ++s) {
        char line[128];
        std::snprintf(line, sizeof(line), "%zu,%lld,%lld,%.6f\n", s + 1,
                      static_cast<long long>(growth[s].added),
                      static_cast<long long>(growth[s].cumulative), growth[s].cumulativeRatio);
        csv += line;
        steps.push_back({{"step", s + 1},
                         {"added", growth[s].added},
                         {"cumulative", growth[s].cumulative},
                         {"cumulative_ratio", growth[s].cumulativeRatio}});
    }
    std::printf("base parameters: %lld\n%s", static_cast<long long>(base), csv.c_str());
    if (!outDir.empty()) {
        fs::create_directories(outDir);
        writeText(outDir + "/param_table.csv", csv);
        writeJson(outDir + "/param_table.json",
                  {{"base_params", base}, {"steps", std::move(steps)}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DIODE: dilatable incremental object detection at desk scale"};
    app.require_subcommand(1);

    std::string specPath, configPath, datasetDir, outDir, runsDir;
    uint64_t seedOverride = 0;

    auto* genData = app.add_subcommand("gen-data", "render a synthetic dataset to disk");
    genData->add_option("spec", specPath, "scene/protocol spec JSON")->required();
    genData->add_option("--out", outDir, "output directory")->required();
    auto* genSeed = genData->add_option("--seed", seedOverride, "override spec seed");

    auto* run = app.add_subcommand("run", "run a continual-learning experiment");
    run->add_option("experiment", configPath, "experiment config JSON")->required();
    run->add_option("--data", datasetDir, "dataset directory from gen-data (else in-memory)");
    run->add_option("--out", outDir, "output directory for run records")->required();
    auto* runSeed = run->add_option("--seed", seedOverride, "override config seeds");

    auto* search = app.add_subcommand("lambda-search", "probe the lambda grid for stability");
    search->add_option("experiment", configPath, "experiment config JSON")->required();
    search->add_option("--data", datasetDir, "dataset directory");
    search->add_option("--out", outDir, "output directory");
    auto* searchSeed = search->add_option("--seed", seedOverride, "override config seed");

    auto* report = app.add_subcommand("report", "aggregate run records into tables");
    report->add_option("runs", runsDir, "directory of run-*.json records")->required();
    report->add_option("--out", outDir, "output directory (defaults to runs dir)");

    auto* paramTable = app.add_subcommand("param-table", "parameter-growth accounting");
    paramTable->add_option("config", configPath, "config JSON")->required();
    paramTable->add_option("--out", outDir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (genData->parsed())
            return cmdGenData(specPath, outDir, seedOverride, !genSeed->empty());
        if (run->parsed())
            return cmdRun(configPath, datasetDir, outDir, seedOverride, !runSeed->empty());
        if (search->parsed())
            return cmdLambdaSearch(configPath, datasetDir, outDir, seedOverride,
                                   !searchSeed->empty());
        if (report->parsed()) return cmdReport(runsDir, outDir);
        if (paramTable->parsed()) return cmdParamTable(configPath, outDir);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
