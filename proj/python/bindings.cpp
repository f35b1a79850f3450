// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sparrow/bench.hpp"
#include "sparrow/checkpoint.hpp"
#include "sparrow/draft.hpp"
#include "sparrow/model.hpp"
#include "sparrow/specdec.hpp"
#include "sparrow/train.hpp"
#include "sparrow/workload.hpp"

namespace py = pybind11;
using namespace sparrow;

namespace {

py::array_t<float> to_numpy(const Matrix& m) {
  py::array_t<float> out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Matrix from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<float>(a.data(), a.data() + r * c));
}

py::dict stats_dict(const DecodeStats& s) {
  py::dict d;
  d["generated_tokens"] = s.generated_tokens;
  d["target_calls"] = s.target_calls;
  d["draft_steps"] = s.draft_steps;
  d["tau"] = s.tau();
  d["prefill_time_s"] = s.prefill_time;
  d["decode_time_s"] = s.decode_time;
  d["wall_time_s"] = s.wall_time;
  d["draft_multiplies"] = s.draft_multiplies;
  d["draft_cache_rows"] = s.draft_cache_rows;
  return d;
}

py::dict result_dict(const DecodeResult& r) {
  py::dict d;
  d["tokens"] = r.tokens;
  d["stats"] = stats_dict(r.stats);
  d["accept_lengths"] = r.accept_lengths;
  return d;
}

}  // namespace

PYBIND11_MODULE(_sparrow, m) {
  m.doc() = "Speculative decoding with visual-aware draft inputs on a toy multimodal target";

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_positions", &ModelConfig::max_positions)
      .def_readwrite("visual_alphabet", &ModelConfig::visual_alphabet)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("rope_base", &ModelConfig::rope_base)
      .def("validate", &ModelConfig::validate)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<TreeConfig>(m, "TreeConfig")
      .def(py::init<>())
      .def_static("parse", &TreeConfig::parse)
      .def_readwrite("total_tokens", &TreeConfig::total_tokens)
      .def_readwrite("depth", &TreeConfig::depth)
      .def_readwrite("width", &TreeConfig::width)
      .def("__str__", &TreeConfig::str);

  py::class_<TokenSequence>(m, "TokenSequence")
      .def(py::init<>())
      .def_readwrite("text", &TokenSequence::text)
      .def_readwrite("symbols", &TokenSequence::symbols)
      .def_property(
          "visual", [](const TokenSequence& s) { return to_numpy(s.visual); },
          [](TokenSequence& s, const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
            s.visual = from_numpy(a);
          })
      .def_property_readonly("visual_len", &TokenSequence::visual_len)
      .def_property_readonly("text_len", &TokenSequence::text_len);

  py::class_<Prompt>(m, "Prompt")
      .def_readonly("seq", &Prompt::seq)
      .def_readonly("reference", &Prompt::reference)
      .def_readonly("answers", &Prompt::answers);

  m.def(
      "grounded_prompts",
      [](const ModelConfig& cfg, int visual_len, int queries, int num_prompts, std::uint64_t seed) {
        WorkloadConfig wc;
        wc.visual_len = visual_len;
        wc.queries = queries;
        wc.num_prompts = num_prompts;
        wc.seed = seed;
        return gen_workload(wc, cfg, make_visual_tables(cfg));
      },
      py::arg("config"), py::arg("visual_len"), py::arg("queries") = 4, py::arg("num_prompts") = 8,
      py::arg("seed") = 1);

  py::class_<TargetModel>(m, "TargetModel")
      .def_static("random", &TargetModel::random, py::arg("config"), py::arg("seed"))
      .def_static("load", [](const std::filesystem::path& p) { return load_target(p); })
      .def("save", [](const TargetModel& t, const std::filesystem::path& p) { save_target(p, t); })
      .def_property_readonly("config", &TargetModel::config)
      .def("logits", [](const TargetModel& t, const TokenSequence& s) { return to_numpy(t.prefill(s).logits); })
      .def("truncated_logits", [](const TargetModel& t, const TokenSequence& s, int x) {
        return to_numpy(t.truncate_visual_from_layer(s, x));
      });

  py::class_<DraftModel>(m, "DraftModel")
      .def_static("random", &DraftModel::random, py::arg("target"), py::arg("seed"), py::keep_alive<0, 1>())
      .def_static(
          "load", [](const std::filesystem::path& p, const TargetModel& t) { return load_draft(p, t); },
          py::arg("path"), py::arg("target"), py::keep_alive<0, 2>())
      .def("save", [](const DraftModel& d, const std::filesystem::path& p) { save_draft(p, d); });

  m.def(
      "pretrain_target",
      [](const ModelConfig& cfg, int steps, int batch, double lr, int max_visual, std::uint64_t seed) {
        TargetTrainConfig tc;
        tc.steps = steps;
        tc.batch = batch;
        tc.lr = lr;
        tc.warmup = std::max(1, steps / 20);
        tc.min_visual = std::min(tc.min_visual, max_visual);
        tc.max_visual = max_visual;
        tc.seed = seed;
        py::gil_scoped_release release;
        return pretrain_target(cfg, tc);
      },
      py::arg("config"), py::arg("steps"), py::arg("batch") = 8, py::arg("lr") = 3e-3, py::arg("max_visual") = 96,
      py::arg("seed") = 1);

  m.def(
      "train_draft",
      [](const TargetModel& t, int stage1_epochs, int stage2_epochs, int examples, int max_visual,
         std::uint64_t seed) {
        DraftTrainConfig tc;
        tc.stage1_epochs = stage1_epochs;
        tc.stage2_epochs = stage2_epochs;
        tc.examples = examples;
        tc.min_visual = std::min(tc.min_visual, max_visual);
        tc.max_visual = max_visual;
        tc.seed = seed;
        py::gil_scoped_release release;
        return train_draft_two_stage(t, tc);
      },
      py::arg("target"), py::arg("stage1_epochs") = 3, py::arg("stage2_epochs") = 3, py::arg("examples") = 2000,
      py::arg("max_visual") = 96, py::arg("seed") = 1, py::keep_alive<0, 1>());

  m.def(
      "decode",
      [](const TargetModel& t, const DraftModel& d, const TokenSequence& s, const std::string& tree,
         double temperature, int max_tokens, int stop_token, const std::string& mode, double prune_fraction,
         std::uint64_t seed) {
        DecodeOptions o;
        o.tree = TreeConfig::parse(tree);
        o.temperature = temperature;
        o.max_tokens = max_tokens;
        o.stop_token = stop_token;
        o.mode = parse_draft_input_mode(mode);
        o.prune_fraction = prune_fraction;
        o.seed = seed;
        return result_dict(decode(t, d, s, o));
      },
      py::arg("target"), py::arg("draft"), py::arg("prompt"), py::arg("tree") = "30-4-8",
      py::arg("temperature") = 0.0, py::arg("max_tokens") = 64, py::arg("stop_token") = -1,
      py::arg("mode") = "vata", py::arg("prune_fraction") = 1.0, py::arg("seed") = 0);

  m.def(
      "vanilla_decode",
      [](const TargetModel& t, const TokenSequence& s, double temperature, int max_tokens, int stop_token,
         std::uint64_t seed) { return result_dict(vanilla_decode(t, s, temperature, max_tokens, stop_token, seed)); },
      py::arg("target"), py::arg("prompt"), py::arg("temperature") = 0.0, py::arg("max_tokens") = 64,
      py::arg("stop_token") = -1, py::arg("seed") = 0);

  m.def(
      "grounded_accuracy",
      [](const TargetModel& t, const std::vector<Prompt>& prompts, int truncate_from) {
        return grounded_accuracy(t, prompts, truncate_from).accuracy();
      },
      py::arg("target"), py::arg("prompts"), py::arg("truncate_from"));

  m.def(
      "speedups",
      [](double vanilla_prefill, double vanilla_decode, double prefill, double decode) {
        MethodSummary van, s;
        van.prefill_time = vanilla_prefill;
        van.decode_time = vanilla_decode;
        van.wall_time = vanilla_prefill + vanilla_decode;
        s.prefill_time = prefill;
        s.decode_time = decode;
        s.wall_time = prefill + decode;
        derive_summary(s, &van);
        return py::make_tuple(s.dsr, s.esr);
      },
      py::arg("vanilla_prefill"), py::arg("vanilla_decode"), py::arg("prefill"), py::arg("decode"),
      "Decode-only and end-to-end speedups over vanilla decoding.");

  m.def("eos_token", [](const ModelConfig& cfg) { return TaskVocab(cfg).eos; });
}
