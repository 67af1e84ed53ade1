#include "vfa/vocab.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "vfa/errors.hpp"

namespace vfa {

VocabSpec VocabSpec::standard(std::size_t n_words) {
  VocabSpec v;
  v.tokens = {"<pad>", "<bos>", "<eos>", "SIL"};
  for (std::size_t i = 0; i < n_words; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "w%02zu", i);
    v.tokens.emplace_back(buf);
  }
  return v;
}

int VocabSpec::id_of(std::string_view token) const {
  const auto it = std::find(tokens.begin(), tokens.end(), token);
  if (it == tokens.end()) throw LabelError("unknown token: " + std::string(token));
  return static_cast<int>(it - tokens.begin());
}

const std::string& VocabSpec::name(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens.size()) {
    throw LabelError("token id out of range: " + std::to_string(id));
  }
  return tokens[static_cast<std::size_t>(id)];
}

bool VocabSpec::is_word(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < tokens.size() && id != pad_id && id != bos_id && id != eos_id &&
         id != sil_id;
}

void VocabSpec::validate() const {
  const std::array<int, 4> specials{pad_id, bos_id, eos_id, sil_id};
  for (std::size_t i = 0; i < specials.size(); ++i) {
    if (specials[i] < 0 || static_cast<std::size_t>(specials[i]) >= tokens.size()) {
      throw ConfigError("vocab: special id out of range");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (specials[i] == specials[j]) throw ConfigError("vocab: special ids must be distinct");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (tokens[i] == tokens[j]) throw ConfigError("vocab: duplicate token " + tokens[i]);
}

}  // namespace vfa
