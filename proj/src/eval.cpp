#include "diffuseq/eval.hpp"

#include "diffuseq/common.hpp"
#include "diffuseq/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>

namespace diffuseq {

using nlohmann::json;

std::string to_json_line(const SampleRecord& r) {
  json j = {{"src", r.src}, {"candidates", r.candidates}, {"mbr_choice", r.mbr_choice},
            {"seed", r.seed}, {"steps", r.steps}};
  return j.dump();
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().find_first_not_of(" \t") == std::string::npos) lines.pop_back();
  return lines;
}

bool looks_like_json(const std::string& line) {
  const auto p = line.find_first_not_of(" \t");
  return p != std::string::npos && line[p] == '{';
}

SampleRecord parse_sample(const json& j, const std::string& where) {
  SampleRecord r;
  try {
    r.src = j.value("src", std::string());
    r.candidates = j.at("candidates").get<std::vector<std::string>>();
    r.mbr_choice = j.value("mbr_choice", 0);
    r.seed = j.value("seed", std::uint64_t{0});
    r.steps = j.value("steps", 0);
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad sample record: " + e.what());
  }
  if (r.candidates.empty() || r.mbr_choice < 0 || r.mbr_choice >= static_cast<int>(r.candidates.size())) {
    throw FormatError(where + ": mbr_choice outside the candidate list");
  }
  return r;
}

json parse_json_line(const std::string& line, const std::string& where) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(where + ": malformed JSON: " + e.what());
  }
}

metrics::Tokens tokens(const std::string& text, bool keep_case) {
  return split_whitespace(normalize_text(text, !keep_case));
}

}  // namespace

std::vector<SampleRecord> read_samples(const std::string& path) {
  std::vector<SampleRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = path + ":" + std::to_string(i + 1);
    if (looks_like_json(lines[i])) {
      const json j = parse_json_line(lines[i], where);
      if (j.is_object() && j.contains("candidates")) {
        out.push_back(parse_sample(j, where));
      } else if (j.is_object() && j.contains("trg") && j["trg"].is_string()) {
        SampleRecord r;
        r.src = j.value("src", std::string());
        r.candidates = {j["trg"].get<std::string>()};
        out.push_back(std::move(r));
      } else {
        throw FormatError(where + ": expected a sample record");
      }
    } else {
      SampleRecord r;
      r.candidates = {lines[i]};
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<std::vector<std::string>> read_references(const std::string& path) {
  std::vector<std::vector<std::string>> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = path + ":" + std::to_string(i + 1);
    if (!looks_like_json(lines[i])) {
      out.push_back({lines[i]});
      continue;
    }
    const json j = parse_json_line(lines[i], where);
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    try {
      if (j.contains("valid")) {
        out.push_back(j["valid"].get<std::vector<std::string>>());
      } else if (j.contains("refs")) {
        out.push_back(j["refs"].get<std::vector<std::string>>());
      } else if (j.contains("trg")) {
        out.push_back({j["trg"].get<std::string>()});
      } else if (j.contains("candidates")) {
        out.push_back({parse_sample(j, where).choice()});
      } else {
        throw FormatError(where + ": no reference field (valid, refs, trg, candidates)");
      }
    } catch (const json::exception& e) {
      throw FormatError(where + ": bad reference: " + e.what());
    }
    if (out.back().empty()) throw FormatError(where + ": empty reference list");
  }
  return out;
}

metrics::EvalReport evaluate(const std::vector<SampleRecord>& samples,
                             const std::vector<std::vector<std::string>>& refs, std::vector<EvalRow>* rows,
                             bool keep_case) {
  if (samples.size() != refs.size()) {
    throw FormatError("eval: " + std::to_string(samples.size()) + " hypotheses but " + std::to_string(refs.size()) +
                      " references");
  }
  metrics::EvalReport rep;
  rep.count = samples.size();
  if (samples.empty()) return rep;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EvalRow row;
    row.hyp = samples[i].choice();
    row.ref = refs[i].front();
    const auto hyp = tokens(row.hyp, keep_case);
    std::vector<metrics::Tokens> ref_tokens;
    for (const auto& r : refs[i]) ref_tokens.push_back(tokens(r, keep_case));
    row.bleu = metrics::bleu(hyp, ref_tokens);
    for (const auto& r : ref_tokens) row.rouge_l = std::max(row.rouge_l, metrics::rouge_l(hyp, r));
    row.dist1 = metrics::dist1(hyp);
    std::vector<metrics::Tokens> div;
    const std::size_t n = std::min<std::size_t>(samples[i].candidates.size(), kDiversityCandidates);
    for (std::size_t c = 0; c < n; ++c) div.push_back(tokens(samples[i].candidates[c], keep_case));
    row.self_bleu = metrics::self_bleu(div);
    row.div4 = metrics::div4(div);
    row.length = hyp.size();

    rep.bleu += row.bleu;
    rep.rouge_l += row.rouge_l;
    rep.dist1 += row.dist1;
    rep.self_bleu += row.self_bleu;
    rep.div4 += row.div4;
    rep.avg_len += static_cast<double>(row.length);
    if (rows) rows->push_back(std::move(row));
  }
  const double n = static_cast<double>(samples.size());
  rep.bleu /= n;
  rep.rouge_l /= n;
  rep.dist1 /= n;
  rep.self_bleu /= n;
  rep.div4 /= n;
  rep.avg_len /= n;
  return rep;
}

std::string report_json(const metrics::EvalReport& r) {
  json j = {{"bleu", r.bleu},   {"rouge_l", r.rouge_l}, {"dist1", r.dist1}, {"self_bleu", r.self_bleu},
            {"div4", r.div4},   {"avg_len", r.avg_len}, {"count", r.count}};
  return j.dump(2);
}

void write_eval_tsv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  auto clean = [](std::string s) {
    std::replace(s.begin(), s.end(), '\t', ' ');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  f << "index\tbleu\trouge_l\tdist1\tself_bleu\tdiv4\tlength\thyp\tref\n";
  f.precision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    f << i << '\t' << r.bleu << '\t' << r.rouge_l << '\t' << r.dist1 << '\t' << r.self_bleu << '\t' << r.div4 << '\t'
      << r.length << '\t' << clean(r.hyp) << '\t' << clean(r.ref) << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace diffuseq
