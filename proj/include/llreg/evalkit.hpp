#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "llreg/model.hpp"
#include "llreg/volume.hpp"

namespace llreg {

/// 2|A∩B| / (|A|+|B|) over voxels carrying `label`; 1.0 when both are empty.
double dice(const LabelVolume& a, const LabelVolume& b, uint32_t label);

/// Percentage of voxels whose Jacobian determinant is <= 0.
double fold_fraction(const DisplacementField& phi);

struct EvalReport {
    std::map<uint32_t, double> dice_per_label;
    double mean_dice = 0.0;
    double pct_nonpos_jacobian = 0.0;
    double register_time_ms = 0.0;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

/// Warps seg_m by phi (nearest) and scores it against seg_f. mean_dice averages
/// the non-background labels present in seg_f.
EvalReport evaluate_field(const DisplacementField& phi, const LabelVolume& seg_m, const LabelVolume& seg_f,
                          double register_time_ms = 0.0);

/// Predicts phi with `steps` cascade steps (timed, single thread) and scores it.
EvalReport evaluate_pair(const RegModel& model, int steps, const ScalarVolume& moving, const ScalarVolume& fixed,
                         const LabelVolume& seg_m, const LabelVolume& seg_f);

}  // namespace llreg
