#include "urbanmind/tokens_prompts.hpp"

#include <cctype>
#include <sstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

void PromptContext::validate() const {
  check_arg(!city.empty(), "prompt context needs a city");
  check_arg(!task.empty(), "prompt context needs a task");
  check_arg(side >= 1 && top_i >= 1 && top_j >= 1, "bad region anchor");
  check_arg(!prior_hours.empty() && !target_hours.empty(),
            "prior and target hour lists must be non-empty");
  for (int p : prior_hours)
    for (int t : target_hours)
      check_arg(p != t, "prior and target hours overlap");
}

namespace {

std::string join_hours(const std::vector<int>& hours) {
  std::ostringstream os;
  for (size_t i = 0; i < hours.size(); ++i) {
    if (i) os << ",";
    os << hours[i];
  }
  return os.str();
}

std::vector<int> split_hours(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stoi(part));
  return out;
}

// Extracts the substring between `prefix` and the next occurrence of `stop`.
std::string between(const std::string& text, const std::string& prefix,
                    const std::string& stop, size_t& pos) {
  const size_t a = text.find(prefix, pos);
  if (a == std::string::npos) throw FormatError("prompt missing field: " + prefix);
  const size_t b = text.find(stop, a + prefix.size());
  if (b == std::string::npos) throw FormatError("prompt missing delimiter after: " + prefix);
  pos = b + stop.size();
  return text.substr(a + prefix.size(), b - a - prefix.size());
}

}  // namespace

std::string build_prompt(const PromptContext& ctx) {
  ctx.validate();
  std::ostringstream os;
  os << "City: " << ctx.city << ". Region top-left: (" << ctx.top_i << ","
     << ctx.top_j << "). Side: " << ctx.side << ". Task: " << ctx.task
     << ". Given hours " << join_hours(ctx.prior_hours) << " predict hours "
     << join_hours(ctx.target_hours) << ".";
  return os.str();
}

PromptContext parse_prompt(const std::string& text) {
  PromptContext ctx;
  size_t pos = 0;
  ctx.city = between(text, "City: ", ". Region", pos);
  pos = 0;
  ctx.top_i = std::stoi(between(text, "top-left: (", ",", pos));
  ctx.top_j = std::stoi(between(text, "", ")", pos));
  ctx.side = std::stoi(between(text, "Side: ", ".", pos));
  ctx.task = between(text, "Task: ", ".", pos);
  ctx.prior_hours = split_hours(between(text, "Given hours ", " predict", pos));
  ctx.target_hours = split_hours(between(text, "hours ", ".", pos));
  ctx.validate();
  return ctx;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  auto word_char = [&](size_t k) {
    if (k >= text.size()) return false;
    const unsigned char c = static_cast<unsigned char>(text[k]);
    if (std::isalnum(c)) return true;
    // ' and - bind words ("Xi'an", "top-left") when flanked by alnums.
    if ((c == '\'' || c == '-') && k > 0 && k + 1 < text.size() &&
        std::isalnum(static_cast<unsigned char>(text[k - 1])) &&
        std::isalnum(static_cast<unsigned char>(text[k + 1])))
      return true;
    return false;
  };
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (word_char(i)) {
      size_t j = i;
      while (word_char(j)) ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
    } else {
      out.push_back(text.substr(i, 1));
      ++i;
    }
  }
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& cities,
                   const std::vector<std::string>& tasks, int max_int) {
  check_arg(max_int >= 1, "vocab needs max_int >= 1");
  Vocab v;
  auto put = [&v](const std::string& tok) {
    if (v.index_.find(tok) == v.index_.end()) {
      v.index_[tok] = static_cast<int>(v.tokens_.size());
      v.tokens_.push_back(tok);
    }
  };
  for (const char* w : {"City", ":", ".", ",", "(", ")", "Region", "top-left",
                        "Side", "Task", "Given", "hours", "predict"})
    put(w);
  for (int i = 0; i <= max_int; ++i) put(std::to_string(i));
  for (const auto& c : cities)
    for (const auto& tok : tokenize(c)) put(tok);
  for (const auto& t : tasks)
    for (const auto& tok : tokenize(t)) put(tok);
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  check_arg(it != index_.end(), "token outside closed vocabulary: " + token);
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

Var assemble_input_graph(Graph& g, const Vocab& vocab, Param& embed_table,
                         Param& proj_w, Param& proj_b, const std::string& prompt,
                         Var u, int64_t* boundary_out) {
  const std::vector<int> ids = vocab.encode(prompt);
  check_arg(!ids.empty(), "empty prompt");
  check_arg(g.value(u).rank() == 2, "token sequence must be (h, d_v+d_k)");
  check_arg(proj_w.shape.size() == 2 && proj_w.shape[1] == g.value(u).dim(1),
            "projector input width must match token width");

  Var text = g.embed_rows(g.param(embed_table), ids);
  Var proj = g.linear(u, g.param(proj_w), g.param(proj_b));
  if (boundary_out) *boundary_out = static_cast<int64_t>(ids.size());
  return g.concat_rows(text, proj);
}

BackboneInput assemble_input(const Vocab& vocab, Param& embed_table, Param& proj_w,
                             Param& proj_b, const std::string& prompt,
                             const TokenSequence& u) {
  Graph g;
  int64_t boundary = 0;
  Var out = assemble_input_graph(g, vocab, embed_table, proj_w, proj_b, prompt,
                                 g.input(u.tokens), &boundary);
  BackboneInput in;
  in.embedded = g.value(out);
  in.boundary = boundary;
  in.text_ids = vocab.encode(prompt);
  return in;
}

}  // namespace urbanmind
