// Regenerates include/parsurdu/joining_data.hpp from the system ICU's copy
// of the Unicode Character Database. Build with -DPARSURDU_TOOLS_ICU=ON;
// the emitted header is checked in, so ICU is not a build dependency of the
// library itself.
//
// Usage: gen_joining_table > include/parsurdu/joining_data.hpp

#include <unicode/uchar.h>
#include <unicode/uversion.h>

#include <cstdio>
#include <string>
#include <vector>

namespace {

enum class Kind { Dual, Right, Transparent, JoinCausing, Other };

Kind classify(UChar32 cp) {
  switch (u_getIntPropertyValue(cp, UCHAR_JOINING_TYPE)) {
    case U_JT_DUAL_JOINING: return Kind::Dual;
    case U_JT_RIGHT_JOINING: return Kind::Right;
    case U_JT_TRANSPARENT: return Kind::Transparent;
    case U_JT_JOIN_CAUSING: return Kind::JoinCausing;
    default: return Kind::Other;  // non-joining and left-joining (unused in the block)
  }
}

const char* enum_name(Kind k) {
  switch (k) {
    case Kind::Dual: return "Dual";
    case Kind::Right: return "Right";
    case Kind::Transparent: return "Transparent";
    case Kind::JoinCausing: return "JoinCausing";
    case Kind::Other: return "?";
  }
  return "?";
}

}  // namespace

int main() {
  UVersionInfo icu_ver, uni_ver;
  u_getVersion(icu_ver);
  u_getUnicodeVersion(uni_ver);
  char icu_str[U_MAX_VERSION_STRING_LENGTH], uni_str[U_MAX_VERSION_STRING_LENGTH];
  u_versionToString(icu_ver, icu_str);
  u_versionToString(uni_ver, uni_str);

  struct Range {
    UChar32 lo, hi;
    Kind kind;
  };
  std::vector<Range> ranges;
  for (UChar32 cp = 0x0600; cp <= 0x06FF; ++cp) {
    const Kind k = classify(cp);
    if (k == Kind::Other) continue;
    if (!ranges.empty() && ranges.back().hi == cp - 1 && ranges.back().kind == k) {
      ranges.back().hi = cp;
    } else {
      ranges.push_back({cp, cp, k});
    }
  }

  std::printf(
      "// Joining types for the Arabic block U+0600..U+06FF, generated from the\n"
      "// Unicode Character Database (ArabicShaping) via ICU %s (Unicode %s). Regenerate with\n"
      "// tools/gen_joining_table.cpp; do not edit by hand.\n"
      "#pragma once\n\n#include <cstdint>\n\nnamespace parsurdu::detail {\n\n"
      "enum class RawJoiningType : std::uint8_t { Dual, Right, Transparent, JoinCausing };\n\n"
      "struct JoiningRange {\n  char32_t lo;\n  char32_t hi;\n  RawJoiningType type;\n};\n\n"
      "// Codepoints in the block not covered below are non-joining (type U).\n"
      "inline constexpr JoiningRange kArabicJoiningRanges[] = {\n",
      icu_str, uni_str);
  for (const Range& r : ranges) {
    std::printf("    {0x%04X, 0x%04X, RawJoiningType::%s},\n", r.lo, r.hi, enum_name(r.kind));
  }
  std::printf("};\n\n}  // namespace parsurdu::detail\n");
  return 0;
}
