#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace vfa {

// Token table shared by frame classes, transcripts and the silence decoder.
struct VocabSpec {
  std::vector<std::string> tokens;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;
  int sil_id = 3;

  // <pad> <bos> <eos> SIL w00 w01 ...
  static VocabSpec standard(std::size_t n_words);

  std::size_t size() const noexcept { return tokens.size(); }
  int id_of(std::string_view token) const;
  const std::string& name(int id) const;
  bool is_word(int id) const;
  void validate() const;

  friend bool operator==(const VocabSpec&, const VocabSpec&) = default;
};

}  // namespace vfa
