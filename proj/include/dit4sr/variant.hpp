#pragma once

#include <array>
#include <string>
#include <string_view>

#include "dit4sr/block.hpp"

namespace dit4sr {

enum class VariantId { FULL, A, B, C, D, CONTROLNET };

inline constexpr std::array<VariantId, 6> kAllVariants = {VariantId::FULL, VariantId::A, VariantId::B,
                                                          VariantId::C,    VariantId::D, VariantId::CONTROLNET};

inline std::string_view to_string(VariantId v) {
    switch (v) {
        case VariantId::FULL: return "FULL";
        case VariantId::A: return "A";
        case VariantId::B: return "B";
        case VariantId::C: return "C";
        case VariantId::D: return "D";
        case VariantId::CONTROLNET: return "CONTROLNET";
    }
    return "?";
}

inline VariantId parse_variant(std::string_view s) {
    for (auto v : kAllVariants)
        if (to_string(v) == s) return v;
    throw ConfigError("unknown variant id '" + std::string(s) + "'");
}

/// Ablation flags. Rows FULL/A/B/C/D follow the ablation table's checkmark matrix:
/// A drops LR integration in attention, B drops the LR residual, C drops the
/// injection, D swaps the conv injection for a dense linear map. CONTROLNET is
/// the one-way baseline and has no LR stream inside the main blocks.
struct VariantSpec {
    VariantId id = VariantId::FULL;
    bool lr_integration = true;
    bool lr_residual = true;
    Injection lr_injection = Injection::conv;

    static VariantSpec of(VariantId id) {
        switch (id) {
            case VariantId::FULL: return {id, true, true, Injection::conv};
            case VariantId::A: return {id, false, true, Injection::conv};
            case VariantId::B: return {id, true, false, Injection::conv};
            case VariantId::C: return {id, true, true, Injection::none};
            case VariantId::D: return {id, true, true, Injection::linear};
            case VariantId::CONTROLNET: return {id, false, false, Injection::none};
        }
        throw ConfigError("unknown variant id");
    }

    /// Flags must equal the table row of the id; CONTROLNET admits no LR flags at all.
    void validate() const {
        const VariantSpec ref = of(id);
        if (lr_integration != ref.lr_integration || lr_residual != ref.lr_residual ||
            lr_injection != ref.lr_injection) {
            throw ConfigError("variant " + std::string(to_string(id)) + " contradicts its flags (lr_integration=" +
                              (lr_integration ? "on" : "off") + ", lr_residual=" + (lr_residual ? "on" : "off") +
                              ", lr_injection=" + std::string(to_string(lr_injection)) + ")");
        }
    }

    BlockLayout block_layout() const {
        if (id == VariantId::CONTROLNET) return {false, false, false, Injection::none};
        return {true, lr_integration, lr_residual, lr_injection};
    }

    bool operator==(const VariantSpec&) const = default;
};

}  // namespace dit4sr
