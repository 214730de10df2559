#pragma once

// Variant construction and matched-seed comparative runs.

#include <cstdio>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dit4sr/analysis.hpp"

namespace dit4sr {

/// A model wired by `spec`; X/C-stream initial weights depend only on (init.seed, name),
/// so every variant built with one seed shares them.
template <class T>
Model<T> build_variant(const VariantSpec& spec, ModelConfig cfg, InitOptions init = {}) {
    spec.validate();
    cfg.variant = spec.id;
    return Model<T>(cfg, init);
}

/// One-way baseline: `n_c` control blocks over (L, C) feeding zero-initialized
/// projections into the first `n_c` main blocks.
template <class T>
Model<T> build_controlnet_baseline(ModelConfig cfg, std::size_t n_c, InitOptions init = {}) {
    if (n_c == 0 || n_c > cfg.depth)
        throw ConfigError("controlnet blocks must lie in [1, depth], got " + std::to_string(n_c));
    cfg.variant = VariantId::CONTROLNET;
    cfg.controlnet_blocks = n_c;
    return Model<T>(cfg, init);
}

struct EvalResult {
    double psnr = 0.0;
    double ssim = 0.0;
    double bicubic_psnr = 0.0;
    double bicubic_ssim = 0.0;
};

/// Mean held-out fidelity of sampled restorations and of plain bicubic upsampling.
/// Sample i starts from noise keyed by (seed, pair index).
template <class T>
EvalResult evaluate(const Model<T>& model, const std::vector<SamplePair>& heldout, const DiffusionSchedule& schedule,
                    std::uint64_t seed) {
    if (heldout.empty()) throw ConfigError("evaluate: empty held-out split");
    const auto& c = model.config();
    EvalResult r;
    for (const auto& p : heldout) {
        if (p.hr.height != c.latent_h || p.hr.width != c.latent_w)
            throw ConfigError("evaluate: HR " + std::to_string(p.hr.height) + "x" + std::to_string(p.hr.width) +
                              " does not match the model's " + std::to_string(c.latent_h) + "x" +
                              std::to_string(c.latent_w));
        const ImageBuffer out = sample(model, p.lr, p.tags, schedule, derive_key(seed, p.index, stage_id::sample_noise));
        ImageBuffer bic = resize(p.lr, c.latent_h, c.latent_w, ResizeMethod::bicubic);
        bic.clamp01();
        r.psnr += psnr(out, p.hr);
        r.ssim += ssim(out, p.hr);
        r.bicubic_psnr += psnr(bic, p.hr);
        r.bicubic_ssim += ssim(bic, p.hr);
    }
    const double n = static_cast<double>(heldout.size());
    r.psnr /= n;
    r.ssim /= n;
    r.bicubic_psnr /= n;
    r.bicubic_ssim /= n;
    return r;
}

struct AblationConfig {
    ModelConfig model;
    InitOptions init;
    TrainConfig train;
    DiffusionSchedule eval_schedule{1};
    std::uint64_t eval_seed = 0;
    std::vector<VariantId> variants{VariantId::FULL, VariantId::A, VariantId::B, VariantId::C, VariantId::D};
};

struct AblationRow {
    VariantSpec spec;
    double final_loss = 0.0;  // mean loss over the last 10% of steps
    EvalResult eval;
};

struct AblationReport {
    std::vector<AblationRow> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << "variant,lr_integration,lr_residual,lr_injection,final_loss,psnr,ssim,bicubic_psnr,bicubic_ssim\n";
        os << std::setprecision(17);
        for (const auto& r : rows)
            os << to_string(r.spec.id) << ',' << (r.spec.lr_integration ? 1 : 0) << ',' << (r.spec.lr_residual ? 1 : 0)
               << ',' << to_string(r.spec.lr_injection) << ',' << r.final_loss << ',' << r.eval.psnr << ','
               << r.eval.ssim << ',' << r.eval.bicubic_psnr << ',' << r.eval.bicubic_ssim << '\n';
        return os.str();
    }

    /// Aligned table whose first columns restate each row's module checkmarks.
    std::string to_table() const {
        std::ostringstream os;
        char line[256];
        std::snprintf(line, sizeof line, "%-11s %-9s %-9s %-9s %10s %8s %8s\n", "variant", "LR-attn", "LR-resid",
                      "LR-inject", "final_loss", "PSNR", "SSIM");
        os << line;
        for (const auto& r : rows) {
            const char* inj = r.spec.lr_injection == Injection::conv     ? "conv"
                              : r.spec.lr_injection == Injection::linear ? "linear"
                                                                         : "-";
            std::snprintf(line, sizeof line, "%-11s %-9s %-9s %-9s %10.5f %8.3f %8.4f\n",
                          std::string(to_string(r.spec.id)).c_str(), r.spec.lr_integration ? "x" : "-",
                          r.spec.lr_residual ? "x" : "-", inj, r.final_loss, r.eval.psnr, r.eval.ssim);
            os << line;
        }
        if (!rows.empty()) {
            std::snprintf(line, sizeof line, "%-11s %-9s %-9s %-9s %10s %8.3f %8.4f\n", "bicubic", "", "", "", "",
                          rows[0].eval.bicubic_psnr, rows[0].eval.bicubic_ssim);
            os << line;
        }
        return os.str();
    }
};

template <class T>
AblationRow train_and_evaluate(const VariantSpec& spec, const AblationConfig& cfg, const DataSplit& data,
                               const std::function<void(Model<T>&)>& inspect = {}) {
    Model<T> model = build_variant<T>(spec, cfg.model, cfg.init);
    Trainer<T> trainer(model, data.train, cfg.train);
    const std::size_t tail = std::max<std::size_t>(1, cfg.train.steps / 10);
    double tail_loss = 0.0;
    for (std::size_t s = 0; s < cfg.train.steps; ++s) {
        const double l = trainer.step();
        if (s + tail >= cfg.train.steps) tail_loss += l;
    }
    AblationRow row{spec, cfg.train.steps ? tail_loss / static_cast<double>(tail) : 0.0, {}};
    row.eval = evaluate(model, data.heldout, cfg.eval_schedule, cfg.eval_seed);
    if (inspect) inspect(model);
    return row;
}

/// Trains each listed variant with identical data order, seeds and step budget.
template <class T>
AblationReport run_ablation(const DataSplit& data, const AblationConfig& cfg) {
    for (const auto* split : {&data.train, &data.heldout})
        for (const auto& p : *split)
            if (p.hr.height != cfg.model.latent_h || p.hr.width != cfg.model.latent_w ||
                p.lr.height * cfg.model.scale_factor != cfg.model.latent_h)
                throw ConfigError("ablation: dataset extents do not match the model configuration");
    AblationReport report;
    for (auto id : cfg.variants) report.rows.push_back(train_and_evaluate<T>(VariantSpec::of(id), cfg, data));
    return report;
}

}  // namespace dit4sr
