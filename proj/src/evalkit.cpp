#include "llreg/evalkit.hpp"

#include <chrono>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

#include "llreg/runtime.hpp"
#include "llreg/warp.hpp"

namespace llreg {

double dice(const LabelVolume& a, const LabelVolume& b, uint32_t label) {
    if (!(a.geometry == b.geometry))
        throw std::invalid_argument("dice: geometry mismatch " + a.geometry.str() + " vs " + b.geometry.str());
    int64_t na = 0, nb = 0, both = 0;
    const auto& da = a.data;
    const auto& db = b.data;
    for (size_t i = 0; i < da.size(); ++i) {
        const bool ia = da[i] == label, ib = db[i] == label;
        na += ia;
        nb += ib;
        both += ia && ib;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(both) / double(na + nb);
}

double fold_fraction(const DisplacementField& phi) {
    const auto det = jacobian_det(phi);
    int64_t folds = 0;
    for (float v : det.data) folds += v <= 0.0f;
    return 100.0 * double(folds) / double(det.data.size());
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [label, d] : dice_per_label) per[std::to_string(label)] = d;
    j["dice_per_label"] = per;
    j["mean_dice"] = mean_dice;
    j["pct_nonpos_jacobian"] = pct_nonpos_jacobian;
    j["register_time_ms"] = register_time_ms;
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    for (const auto& [k, v] : j.at("dice_per_label").items()) r.dice_per_label[std::stoul(k)] = v.get<double>();
    r.mean_dice = j.at("mean_dice").get<double>();
    r.pct_nonpos_jacobian = j.at("pct_nonpos_jacobian").get<double>();
    r.register_time_ms = j.at("register_time_ms").get<double>();
    return r;
}

EvalReport evaluate_field(const DisplacementField& phi, const LabelVolume& seg_m, const LabelVolume& seg_f,
                          double register_time_ms) {
    if (!(phi.geometry == seg_m.geometry) || !(seg_m.geometry == seg_f.geometry))
        throw std::invalid_argument("evaluate: geometry mismatch between field " + phi.geometry.str() +
                                    ", moving seg " + seg_m.geometry.str() + " and fixed seg " +
                                    seg_f.geometry.str());
    const auto warped = warp_labels(seg_m, phi);
    std::set<uint32_t> labels;
    for (uint32_t l : seg_f.data)
        if (l != 0) labels.insert(l);
    EvalReport r;
    double acc = 0.0;
    for (uint32_t l : labels) {
        const double d = dice(warped, seg_f, l);
        r.dice_per_label[l] = d;
        acc += d;
    }
    r.mean_dice = labels.empty() ? 1.0 : acc / double(labels.size());
    r.pct_nonpos_jacobian = fold_fraction(phi);
    r.register_time_ms = register_time_ms;
    return r;
}

EvalReport evaluate_pair(const RegModel& model, int steps, const ScalarVolume& moving, const ScalarVolume& fixed,
                         const LabelVolume& seg_m, const LabelVolume& seg_f) {
    const int saved = thread_count();
    set_thread_count(1);
    const auto t0 = std::chrono::steady_clock::now();
    DisplacementField phi;
    try {
        phi = predict_field(model, moving, fixed, steps);
    } catch (...) {
        set_thread_count(saved);
        throw;
    }
    const auto t1 = std::chrono::steady_clock::now();
    set_thread_count(saved);
    return evaluate_field(phi, seg_m, seg_f, std::chrono::duration<double, std::milli>(t1 - t0).count());
}

}  // namespace llreg
