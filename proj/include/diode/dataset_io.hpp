#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "diode/common.hpp"
#include "diode/data.hpp"
#include "diode/png.hpp"

namespace diode {

// On-disk dataset layout:
//   <dir>/spec.json                 resolved scene spec + protocol
//   <dir>/train_step_<s>/*.png      images
//   <dir>/train_step_<s>/annotations.json   masked (step-s classes only)
//   <dir>/test/*.png + annotations.json     complete annotations
//   <dir>/full/train_step_<s>.json  unmasked annotations (evaluation only)

namespace dataset_io {

using nlohmann::json;

inline json boxesToJson(const std::vector<BBox>& boxes, bool withScore = false) {
    json arr = json::array();
    for (const auto& b : boxes) {
        json j = {{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"class", b.class_id}};
        if (withScore) {
            j["score"] = b.score;
            j["source"] = "pseudo";
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

inline std::vector<BBox> boxesFromJson(const json& arr) {
    std::vector<BBox> out;
    for (const auto& j : arr) {
        BBox b;
        b.x1 = j.at("x1").get<double>();
        b.y1 = j.at("y1").get<double>();
        b.x2 = j.at("x2").get<double>();
        b.y2 = j.at("y2").get<double>();
        b.class_id = j.at("class").get<int>();
        b.score = j.value("score", -1.0);
        out.push_back(b);
    }
    return out;
}

inline void writeJsonFile(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw UsageError("cannot write " + path);
    os << j.dump(2) << "\n";
}

inline json readJsonFile(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read " + path);
    json j;
    is >> j;
    return j;
}

inline void writeSplit(const DatasetSplit& split, const std::string& dir, int imageSize) {
    std::filesystem::create_directories(dir);
    json ann = json::array();
    for (const auto& sample : split.samples) {
        const std::string file = sample.id + ".png";
        std::vector<uint8_t> pixels(sample.image.data.size());
        for (size_t i = 0; i < pixels.size(); ++i)
            pixels[i] = static_cast<uint8_t>(std::lround(sample.image.data[i] * 255.0));
        png::writeFile(dir + "/" + file, png::encodeGray8(pixels, imageSize, imageSize));
        ann.push_back({{"image", file}, {"boxes", boxesToJson(sample.boxes)}});
    }
    writeJsonFile(dir + "/annotations.json", ann);
}

inline DatasetSplit readSplit(const std::string& dir, const std::string& role) {
    DatasetSplit split;
    split.role = role;
    const json ann = readJsonFile(dir + "/annotations.json");
    for (const auto& entry : ann) {
        Sample sample;
        const std::string file = entry.at("image").get<std::string>();
        sample.id = file.substr(0, file.rfind('.'));
        const png::GrayImage img = png::decodeGray8(png::readFile(dir + "/" + file));
        Tensor t({1, 1, img.height, img.width});
        for (size_t i = 0; i < img.pixels.size(); ++i) t.data[i] = img.pixels[i] / 255.0;
        sample.image = std::move(t);
        sample.boxes = boxesFromJson(entry.at("boxes"));
        split.samples.push_back(std::move(sample));
    }
    return split;
}

inline json sceneSpecToJson(const SceneSpec& s) {
    return {{"image_size", s.image_size},       {"num_classes", s.num_classes},
            {"min_objects", s.min_objects},     {"max_objects", s.max_objects},
            {"min_size_frac", s.min_size_frac}, {"max_size_frac", s.max_size_frac},
            {"occlusion_iou", s.occlusion_iou}, {"noise_level", s.noise_level},
            {"seed", s.seed}};
}

inline SceneSpec sceneSpecFromJson(const json& j) {
    SceneSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.min_objects = j.value("min_objects", s.min_objects);
    s.max_objects = j.value("max_objects", s.max_objects);
    s.min_size_frac = j.value("min_size_frac", s.min_size_frac);
    s.max_size_frac = j.value("max_size_frac", s.max_size_frac);
    s.occlusion_iou = j.value("occlusion_iou", s.occlusion_iou);
    s.noise_level = j.value("noise_level", s.noise_level);
    s.seed = j.value("seed", s.seed);
    return s;
}

}  // namespace dataset_io

inline void writeProtocol(const TaskProtocol& proto, const std::string& dir) {
    namespace io = dataset_io;
    std::filesystem::create_directories(dir);
    io::json spec = {{"scene", io::sceneSpecToJson(proto.scene)},
                     {"step_sizes", proto.stepSizes},
                     {"seed", proto.seed},
                     {"train_per_step", proto.trainSteps.empty()
                                            ? 0
                                            : static_cast<int>(proto.trainSteps[0].samples.size())},
                     {"test_size", static_cast<int>(proto.test.samples.size())}};
    io::writeJsonFile(dir + "/spec.json", spec);
    for (int s = 0; s < proto.numSteps(); ++s)
        io::writeSplit(proto.trainSteps[static_cast<size_t>(s)],
                       dir + "/train_step_" + std::to_string(s), proto.scene.image_size);
    io::writeSplit(proto.test, dir + "/test", proto.scene.image_size);
    std::filesystem::create_directories(dir + "/full");
    for (int s = 0; s < proto.numSteps(); ++s) {
        io::json ann = io::json::array();
        for (const auto& sample : proto.trainFull[static_cast<size_t>(s)].samples)
            ann.push_back({{"image", sample.id + ".png"}, {"boxes", io::boxesToJson(sample.boxes)}});
        io::writeJsonFile(dir + "/full/train_step_" + std::to_string(s) + ".json", ann);
    }
}

inline TaskProtocol readProtocol(const std::string& dir) {
    namespace io = dataset_io;
    const io::json spec = io::readJsonFile(dir + "/spec.json");
    TaskProtocol proto;
    proto.scene = io::sceneSpecFromJson(spec.at("scene"));
    proto.stepSizes = spec.at("step_sizes").get<std::vector<int>>();
    proto.seed = spec.at("seed").get<uint64_t>();
    int next = 0;
    for (int s : proto.stepSizes) {
        std::vector<int> cls;
        for (int i = 0; i < s; ++i) cls.push_back(next++);
        proto.stepClasses.push_back(cls);
    }
    for (int s = 0; s < proto.numSteps(); ++s) {
        const std::string stepDir = dir + "/train_step_" + std::to_string(s);
        proto.trainSteps.push_back(io::readSplit(stepDir, "train-step-" + std::to_string(s)));
        // unmasked annotations, paired with the same images
        DatasetSplit full = proto.trainSteps.back();
        full.role += "-full";
        const io::json ann = io::readJsonFile(dir + "/full/train_step_" + std::to_string(s) + ".json");
        for (size_t i = 0; i < full.samples.size() && i < ann.size(); ++i)
            full.samples[i].boxes = io::boxesFromJson(ann[i].at("boxes"));
        proto.trainFull.push_back(std::move(full));
    }
    proto.test = io::readSplit(dir + "/test", "test");
    return proto;
}

}  // namespace diode
