#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hammerlite::text {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Byte-level vocabulary: five role tokens followed by the 256 byte values.
inline constexpr Token kPad = 0;
inline constexpr Token kEosState = 1;
inline constexpr Token kEosPremise = 2;
inline constexpr Token kSep = 3;
inline constexpr Token kBos = 4;
inline constexpr Token kByteOffset = 5;
inline constexpr int kVocabSize = 261;

constexpr Token byte_token(unsigned char b) { return static_cast<Token>(b) + kByteOffset; }
constexpr bool is_special(Token t) { return t < kByteOffset; }

inline TokenSeq encode(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (char c : text) out.push_back(byte_token(static_cast<unsigned char>(c)));
  return out;
}

// Inverse of encode; role tokens carry no bytes and are dropped.
inline std::string decode(const TokenSeq& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t >= kVocabSize) throw std::out_of_range("decode: token outside vocabulary");
    if (!is_special(t)) out.push_back(static_cast<char>(t - kByteOffset));
  }
  return out;
}

namespace detail {

inline void append_bytes(TokenSeq& out, std::string_view bytes) {
  for (char c : bytes) out.push_back(byte_token(static_cast<unsigned char>(c)));
}

inline void check_context(std::size_t ctx_len, std::size_t minimum, const char* what) {
  if (ctx_len < minimum)
    throw std::invalid_argument(std::string(what) + ": context length must be at least " +
                                std::to_string(minimum));
}

}  // namespace detail

// Proof states keep their tail: the open goal sits at the end of the text.
inline TokenSeq encode_state(std::string_view text, std::size_t ctx_len) {
  detail::check_context(ctx_len, 2, "encode_state");
  const std::size_t keep = std::min(text.size(), ctx_len - 1);
  TokenSeq out;
  out.reserve(keep + 1);
  detail::append_bytes(out, text.substr(text.size() - keep));
  out.push_back(kEosState);
  return out;
}

// Premises keep their head: name and the start of the statement.
inline TokenSeq encode_premise(std::string_view text, std::size_t ctx_len) {
  detail::check_context(ctx_len, 2, "encode_premise");
  const std::size_t keep = std::min(text.size(), ctx_len - 1);
  TokenSeq out;
  out.reserve(keep + 1);
  detail::append_bytes(out, text.substr(0, keep));
  out.push_back(kEosPremise);
  return out;
}

// Layout: [state bytes] SEP [premise bytes] EOS_PREMISE. When the pair does
// not fit, the premise is guaranteed at least half of the byte budget and the
// state gets the rest (tail-truncated).
inline TokenSeq encode_pair(std::string_view state, std::string_view premise, std::size_t ctx_len) {
  detail::check_context(ctx_len, 3, "encode_pair");
  const std::size_t budget = ctx_len - 2;
  std::size_t premise_keep = premise.size();
  std::size_t state_keep = state.size();
  if (state.size() + premise.size() > budget) {
    const std::size_t half = (budget + 1) / 2;
    premise_keep = std::min(premise.size(), std::max(half, budget - std::min(state.size(), budget)));
    state_keep = std::min(state.size(), budget - premise_keep);
  }
  TokenSeq out;
  out.reserve(state_keep + premise_keep + 2);
  detail::append_bytes(out, state.substr(state.size() - state_keep));
  out.push_back(kSep);
  detail::append_bytes(out, premise.substr(0, premise_keep));
  out.push_back(kEosPremise);
  return out;
}

inline std::string tactic_prompt(std::string_view state, std::string_view tactic) {
  if (tactic.empty()) throw std::invalid_argument("tactic prompt: tactic name must be non-empty");
  std::string out;
  out.reserve(tactic.size() + 1 + state.size());
  out.append(tactic);
  out.push_back(':');
  out.append(state);
  return out;
}

inline TokenSeq encode_state_with_tactic(std::string_view state, std::string_view tactic,
                                         std::size_t ctx_len) {
  return encode_state(tactic_prompt(state, tactic), ctx_len);
}

}  // namespace hammerlite::text
