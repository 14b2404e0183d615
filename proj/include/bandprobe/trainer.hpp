#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bandprobe/dataio.hpp"
#include "bandprobe/tensor.hpp"
#include "bandprobe/unet.hpp"

namespace bandprobe {

// Reflectance scaling: clamp negatives to 0, divide by 10000, cap at 1.
Tensor<float> scale_input(const Tensor<float>& raw);

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    float learning_rate = 1e-3f;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochEntry {
    int epoch = 0;          // 0-based
    double train_loss = 0;  // pixel-mean cross entropy over the epoch
    double val_loss = 0;
    double seconds = 0;     // wall time for the epoch
};

struct TrainLog {
    std::vector<EpochEntry> entries;
    int selected_epoch = 0;  // argmin of val_loss, earliest on ties
};

std::string trainlog_to_csv(const TrainLog& log);

// Mini-batch Adam over cross entropy. On return the model carries the
// parameters and batchnorm statistics of the lowest-validation-loss epoch
// and sits in eval mode.
TrainLog train(UNet<float>& model, const std::vector<RasterSample>& train_set,
               const std::vector<RasterSample>& val_set, const TrainConfig& config);

// Pixel-mean cross entropy of the model over a sample set, eval mode,
// sample order fixed.
double validation_loss(UNet<float>& model, const std::vector<RasterSample>& samples);

}  // namespace bandprobe
