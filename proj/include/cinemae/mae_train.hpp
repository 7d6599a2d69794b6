#pragma once

// Desk-scale MAE pretraining for the toy architecture: masked-patch MSE in the
// backbone's target space, Adam, per-image random masks.

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cinemae/aggregate.hpp"
#include "cinemae/autodiff.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/nn.hpp"
#include "cinemae/random.hpp"

namespace cinemae::toy {

using ad::Matrix;
using ad::Tape;
using ad::Var;

struct MaeTrainConfig {
    int batch_size = 16;
    double learning_rate = 1e-3;
    double mask_ratio = 0.75;
    std::uint64_t seed = 0;
};

inline backbone::PatchGrid make_grid(const backbone::ArchSpec& arch, const backbone::Normalization& norm, const Image& img,
                                     std::string id) {
    if (img.height != arch.image_size || img.width != arch.image_size)
        throw DimensionError("image is not " + std::to_string(arch.image_size) + " pixels square");
    auto g = backbone::patchify(to_rgb(img), arch.patch_size, std::move(id));
    backbone::normalize_pixels(g, norm);
    return g;
}

inline std::vector<backbone::PatchGrid> make_grids(const backbone::ArchSpec& arch, const backbone::Normalization& norm,
                                                   const corpus::Corpus& c) {
    std::vector<backbone::PatchGrid> out;
    out.reserve(c.samples.size());
    for (const auto& s : c.samples) out.push_back(make_grid(arch, norm, s.pixels(), s.id));
    return out;
}

/// Masked reconstruction loss of one image on `t`; differentiable with respect
/// to whatever weights are mutable.
template <typename W>
Var masked_mse(Tape& t, W& w, const backbone::ArchSpec& arch, backbone::TargetSpace space, const backbone::PatchGrid& g,
               const std::vector<int>& mask) {
    const auto visible = backbone::visible_complement(mask, g.num_patches());
    const Matrix target = backbone::to_target_space(g.patches, space);
    Matrix masked_target(static_cast<Eigen::Index>(mask.size()), target.cols());
    for (std::size_t j = 0; j < mask.size(); ++j) masked_target.row(static_cast<Eigen::Index>(j)) = target.row(mask[j]);
    Var pred = ad::gather_rows(backbone::decode(t, w, arch, backbone::encode(t, w, arch, g.patches, visible), visible), mask);
    return ad::mean(ad::square(ad::sub(pred, t.constant(std::move(masked_target)))));
}

/// Owns a mutable toy MAE and trains it epoch by epoch.
class MaeTrainer {
public:
    MaeTrainer(backbone::ArchSpec arch, backbone::Normalization norm, MaeTrainConfig config)
        : arch_(std::move(arch)),
          norm_(norm),
          config_(config),
          weights_(std::make_unique<backbone::MaeWeights>(backbone::init_weights(arch_, derive_seed(config.seed, "mae-init")))) {
        if (config_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
        params_ = nn::parameters_of(*weights_);
        opt_ = std::make_unique<nn::Adam>(params_, nn::AdamConfig{config_.learning_rate});
    }

    const backbone::ArchSpec& arch() const { return arch_; }
    const backbone::Normalization& normalization() const { return norm_; }
    int epoch() const { return epoch_; }

    /// One pass over `grids` in a seeded shuffled order. Returns the mean loss.
    double train_epoch(const std::vector<backbone::PatchGrid>& grids) {
        if (grids.empty()) throw DataError("no images to train on");
        ++epoch_;
        std::vector<std::size_t> order(grids.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(config_.seed, "mae-shuffle:" + std::to_string(epoch_)));
        rng.shuffle(order);
        const int count = aggregate::mask_count(arch_.num_patches(), config_.mask_ratio);
        double total = 0.0;
        std::size_t in_batch = 0;
        for (std::size_t n = 0; n < order.size(); ++n) {
            const auto& g = grids[order[n]];
            Rng mask_rng(derive_seed(config_.seed, "mae-mask:" + std::to_string(epoch_) + ":" + std::to_string(n)));
            auto mask = mask_rng.sample_without_replacement(arch_.num_patches(), count);
            std::sort(mask.begin(), mask.end());
            const std::size_t batch_end = std::min(order.size(), (n / config_.batch_size + 1) * config_.batch_size);
            const std::size_t batch_len = batch_end - (n / config_.batch_size) * config_.batch_size;
            Tape t;
            Var loss = masked_mse(t, *weights_, arch_, norm_.target, g, mask);
            total += loss.value()(0, 0);
            t.backward(ad::scale(loss, 1.0 / static_cast<double>(batch_len)));
            if (++in_batch == batch_len) {
                opt_->step();
                in_batch = 0;
            }
        }
        const double mean = total / static_cast<double>(grids.size());
        if (!std::isfinite(mean)) throw NonFiniteError("toy MAE loss diverged");
        return mean;
    }

    /// Mean Gaussian NLL of masked patches under one fixed mask per image.
    double mean_nll(const std::vector<backbone::PatchGrid>& grids, double sigma_nll = 1.0) const {
        if (grids.empty()) throw EmptyError("no images to score");
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& g : grids) {
            const auto plan = aggregate::sample_masks(g.num_patches(), config_.mask_ratio, 1,
                                                      derive_seed(config_.seed, "nll-mask:" + g.image_id));
            const auto& mask = plan.masks.front();
            const auto visible = backbone::visible_complement(mask, g.num_patches());
            const backbone::MaeWeights& w = *weights_;
            Tape t;
            Var pred = backbone::decode(t, w, arch_, backbone::encode(t, w, arch_, g.patches, visible), visible);
            const Matrix target = backbone::to_target_space(g.patches, norm_.target);
            for (int m : mask) {
                total += cas::nll_gaussian(target.row(m), pred.value().row(m), sigma_nll);
                ++n;
            }
        }
        return total / static_cast<double>(n);
    }

    /// Frozen copy of the current weights.
    backbone::Backbone snapshot() const {
        backbone::MaeWeights w = *weights_;
        w.for_each_parameter([](ad::Parameter& p) {
            p.trainable = false;
            p.grad.resize(0, 0);
        });
        return backbone::Backbone(arch_, norm_, std::move(w));
    }

private:
    backbone::ArchSpec arch_;
    backbone::Normalization norm_;
    MaeTrainConfig config_;
    std::unique_ptr<backbone::MaeWeights> weights_;
    std::vector<ad::Parameter*> params_;
    std::unique_ptr<nn::Adam> opt_;
    int epoch_ = 0;
};

}  // namespace cinemae::toy
