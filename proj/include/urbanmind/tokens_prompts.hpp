#pragma once

#include <map>
#include <string>
#include <vector>

#include "urbanmind/graph.hpp"
#include "urbanmind/muffin_mae.hpp"

namespace urbanmind {

// Semantic context rendered into the instruction prompt.
struct PromptContext {
  std::string city;
  int top_i = 1;
  int top_j = 1;
  int side = 10;
  std::vector<int> prior_hours;   // h slot labels, 1-based
  std::vector<int> target_hours;  // m slot labels
  std::string task;

  void validate() const;
};

// Deterministic template rendering; parse_prompt is its exact inverse.
std::string build_prompt(const PromptContext& ctx);
PromptContext parse_prompt(const std::string& text);

// Word-level tokens: alnum runs (with interior ' and -) plus single
// punctuation marks.
std::vector<std::string> tokenize(const std::string& text);

// Closed vocabulary covering every renderable prompt for the given cities,
// tasks and integer range.
class Vocab {
 public:
  static Vocab build(const std::vector<std::string>& cities,
                     const std::vector<std::string>& tasks, int max_int);

  int id(const std::string& token) const;  // throws on unknown token
  const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(tokens_.size()); }
  std::vector<int> encode(const std::string& text) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// Prompt embeddings followed by affine projections of the dynamics tokens.
struct BackboneInput {
  Tensor embedded;    // (n_text + h, hidden)
  int64_t boundary = 0;  // index of the first dynamics-token position
  std::vector<int> text_ids;
};

// proj_w: (hidden, d_v+d_k), proj_b: (hidden,). Returns the embedded sequence
// var; boundary (= n_text) is written through if requested.
Var assemble_input_graph(Graph& g, const Vocab& vocab, Param& embed_table,
                         Param& proj_w, Param& proj_b, const std::string& prompt,
                         Var u, int64_t* boundary_out = nullptr);

BackboneInput assemble_input(const Vocab& vocab, Param& embed_table, Param& proj_w,
                             Param& proj_b, const std::string& prompt,
                             const TokenSequence& u);

}  // namespace urbanmind
