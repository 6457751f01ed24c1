// Joining types for the Arabic block U+0600..U+06FF, generated from the
// Unicode Character Database (ArabicShaping) via ICU 70.1 (Unicode 14.0). Regenerate with
// tools/gen_joining_table.cpp; do not edit by hand.
#pragma once

#include <cstdint>

namespace parsurdu::detail {

enum class RawJoiningType : std::uint8_t { Dual, Right, Transparent, JoinCausing };

struct JoiningRange {
  char32_t lo;
  char32_t hi;
  RawJoiningType type;
};

// Codepoints in the block not covered below are non-joining (type U).
inline constexpr JoiningRange kArabicJoiningRanges[] = {
    {0x0610, 0x061A, RawJoiningType::Transparent},
    {0x061C, 0x061C, RawJoiningType::Transparent},
    {0x0620, 0x0620, RawJoiningType::Dual},
    {0x0622, 0x0625, RawJoiningType::Right},
    {0x0626, 0x0626, RawJoiningType::Dual},
    {0x0627, 0x0627, RawJoiningType::Right},
    {0x0628, 0x0628, RawJoiningType::Dual},
    {0x0629, 0x0629, RawJoiningType::Right},
    {0x062A, 0x062E, RawJoiningType::Dual},
    {0x062F, 0x0632, RawJoiningType::Right},
    {0x0633, 0x063F, RawJoiningType::Dual},
    {0x0640, 0x0640, RawJoiningType::JoinCausing},
    {0x0641, 0x0647, RawJoiningType::Dual},
    {0x0648, 0x0648, RawJoiningType::Right},
    {0x0649, 0x064A, RawJoiningType::Dual},
    {0x064B, 0x065F, RawJoiningType::Transparent},
    {0x066E, 0x066F, RawJoiningType::Dual},
    {0x0670, 0x0670, RawJoiningType::Transparent},
    {0x0671, 0x0673, RawJoiningType::Right},
    {0x0675, 0x0677, RawJoiningType::Right},
    {0x0678, 0x0687, RawJoiningType::Dual},
    {0x0688, 0x0699, RawJoiningType::Right},
    {0x069A, 0x06BF, RawJoiningType::Dual},
    {0x06C0, 0x06C0, RawJoiningType::Right},
    {0x06C1, 0x06C2, RawJoiningType::Dual},
    {0x06C3, 0x06CB, RawJoiningType::Right},
    {0x06CC, 0x06CC, RawJoiningType::Dual},
    {0x06CD, 0x06CD, RawJoiningType::Right},
    {0x06CE, 0x06CE, RawJoiningType::Dual},
    {0x06CF, 0x06CF, RawJoiningType::Right},
    {0x06D0, 0x06D1, RawJoiningType::Dual},
    {0x06D2, 0x06D3, RawJoiningType::Right},
    {0x06D5, 0x06D5, RawJoiningType::Right},
    {0x06D6, 0x06DC, RawJoiningType::Transparent},
    {0x06DF, 0x06E4, RawJoiningType::Transparent},
    {0x06E7, 0x06E8, RawJoiningType::Transparent},
    {0x06EA, 0x06ED, RawJoiningType::Transparent},
    {0x06EE, 0x06EF, RawJoiningType::Right},
    {0x06FA, 0x06FC, RawJoiningType::Dual},
    {0x06FF, 0x06FF, RawJoiningType::Dual},
};

}  // namespace parsurdu::detail
