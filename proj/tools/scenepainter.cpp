// scenepainter: command-line front end.
//
// Exit codes: 0 success, 1 domain error, 2 usage or I/O error.

#include <CLI11.hpp>

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/eval.hpp"
#include "scenepainter/image_io.hpp"
#include "scenepainter/pipeline.hpp"
#include "scenepainter/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scenepainter;

namespace {

constexpr int kOutputSchema = 1;

struct Output {
    bool as_json = false;

    void emit(json body, const std::string& text) const {
        if (as_json) {
            body["schema"] = kOutputSchema;
            std::cout << body.dump() << "\n";
        } else {
            std::cout << text << "\n";
        }
    }

    int fail(const std::string& code, const std::string& message, int exit_code) const {
        if (as_json) std::cout << json{{"schema", kOutputSchema}, {"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
        else std::cerr << "error: " << code << ": " << message << "\n";
        return exit_code;
    }
};

json read_json_file(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, path.string() + ": " + ex.what());
    }
}

std::string as_token(const std::string& s) {
    if (s.size() >= 2 && s.front() == '<' && s.back() == '>') return s;
    return "<" + s + ">";
}

Mask rect_mask(const std::string& spec, int h, int w) {
    int y0, x0, y1, x1;
    char c1, c2, c3;
    std::istringstream is(spec);
    if (!(is >> y0 >> c1 >> x0 >> c2 >> y1 >> c3 >> x1) || c1 != ',' || c2 != ',' || c3 != ',')
        throw Error(ErrorCode::InvalidInstruction, "hint rect must be y0,x0,y1,x1");
    if (y0 < 0 || x0 < 0 || y1 > h || x1 > w || y0 >= y1 || x0 >= x1)
        throw Error(ErrorCode::MaskSizeMismatch, "hint rect outside the frame");
    Mask m = Mask::zeros(h, w);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m(y, x) = 1;
    return m;
}

json session_summary(const pipeline::Session& s) {
    return {{"session", s.dir().string()},
            {"frames", s.frames().size()},
            {"graph_version", s.graph_version()},
            {"points", s.scene().size()},
            {"seed", s.config().seed},
            {"generation_seed", s.generation_seed()}};
}

service::Service* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scene-concept-graph guided perpetual view generation"};
    app.require_subcommand(1);
    Output out;
    app.add_flag("--json", out.as_json, "Machine-readable output");

    auto* construct = app.add_subcommand("construct", "Build the graph, customise the model and start a session");
    std::string image_path, spec_path, out_dir, config_path;
    construct->add_option("--image", image_path, "Initial image (PNG)")->required();
    construct->add_option("--spec", spec_path, "Concept spec (JSON)")->required();
    construct->add_option("--out", out_dir, "Session directory to create")->required();
    construct->add_option("--config", config_path, "Session config (JSON)");

    auto* generate = app.add_subcommand("generate", "Append frames along the camera trajectory");
    std::string session_dir;
    int n_frames = 0;
    std::string trajectory;
    std::optional<std::uint64_t> seed;
    generate->add_option("--session", session_dir, "Session directory")->required();
    generate->add_option("--frames", n_frames, "Frames to append")->required()->check(CLI::NonNegativeNumber);
    generate->add_option("--trajectory", trajectory, "Camera path")
        ->check(CLI::IsMember({"recede", "translate", "orbit"}));
    generate->add_option("--seed", seed, "Generation seed");

    auto* refine = app.add_subcommand("refine", "Add, change or mute a concept");
    std::string add_desc, mute_handle, hint_rle, hint_rect;
    std::vector<std::string> change_args;
    bool now = false;
    refine->add_option("--session", session_dir, "Session directory")->required();
    auto* add_opt = refine->add_option("--add", add_desc, "Describe a new concept");
    auto* change_opt = refine->add_option("--change", change_args, "HANDLE DESCRIPTION")->expected(2);
    auto* mute_opt = refine->add_option("--mute", mute_handle, "Handle to mute");
    add_opt->excludes(change_opt)->excludes(mute_opt);
    change_opt->excludes(mute_opt);
    refine->add_option("--hint-rle", hint_rle, "Mask hint in RLE form");
    refine->add_option("--hint-rect", hint_rect, "Mask hint rectangle y0,x0,y1,x1");
    refine->add_flag("--now", now, "Refine on the latest frame instead of the next step");

    auto* evaluate = app.add_subcommand("eval", "Scene fidelity of the generated frames");
    std::string backend = "toy", command;
    bool all_pairs = false;
    evaluate->add_option("--session", session_dir, "Session directory")->required();
    evaluate->add_option("--backend", backend, "Embedding backend")->check(CLI::IsMember({"toy", "adapter"}));
    evaluate->add_option("--command", command, "Embedder command for the adapter backend");
    evaluate->add_flag("--all-pairs", all_pairs, "Mean over pairs of generated frames");

    auto* graph_cmd = app.add_subcommand("graph", "Print the current scene concept graph");
    graph_cmd->add_option("--session", session_dir, "Session directory")->required();

    auto* validate_cmd = app.add_subcommand("validate", "Check a session directory");
    validate_cmd->add_option("--session", session_dir, "Session directory")->required();

    auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
    int port = 8080;
    std::string root, host = "127.0.0.1";
    int max_side = 512;
    serve->add_option("--port", port, "TCP port")->required()->check(CLI::Range(1, 65535));
    serve->add_option("--root", root, "Directory holding sessions")->required();
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--max-image-side", max_side, "Upload size cap")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (*construct) {
            const Image image = read_png(image_path);
            const json spec_doc = read_json_file(spec_path);
            pipeline::SessionConfig config;
            if (!config_path.empty()) config = pipeline::session_config_from_json(read_json_file(config_path));
            const auto spec = pipeline::scene_spec_from_json(spec_doc, image.height(), image.width());
            auto lease = pipeline::SessionLease::acquire(out_dir);
            auto s = pipeline::init_session(out_dir, image, spec, config);
            const auto body = session_summary(s);
            out.emit(body, "constructed " + out_dir + " (" + std::to_string(s.graph().nodes().size()) + " concepts, " +
                               std::to_string(s.graph().edges().size()) + " relations)");
            return 0;
        }

        if (*generate) {
            auto lease = pipeline::SessionLease::acquire(session_dir);
            auto s = pipeline::open_session(session_dir);
            if (!trajectory.empty()) s.set_trajectory(geometry::trajectory_kind_from_string(trajectory));
            if (seed) s.set_generation_seed(*seed);
            json frames = json::array();
            std::optional<pipeline::InstructionRecord> failed;
            for (int i = 0; i < n_frames; ++i) {
                auto r = s.step();
                frames.push_back(r.frame.index);
                if (r.instruction && r.instruction->status == "failed") failed = r.instruction;
            }
            auto body = session_summary(s);
            body["new_frames"] = frames;
            if (failed) return out.fail(failed->error_code, failed->error, 1);
            out.emit(body, "generated " + std::to_string(n_frames) + " frame(s); session now has " +
                               std::to_string(s.frames().size()));
            return 0;
        }

        if (*refine) {
            graph::RefineInstruction in;
            if (*add_opt) {
                in.kind = graph::RefineInstruction::Kind::Add;
                in.description = add_desc;
            } else if (*change_opt) {
                in.kind = graph::RefineInstruction::Kind::Change;
                in.target_handle = as_token(change_args.at(0));
                in.description = change_args.at(1);
            } else if (*mute_opt) {
                in.kind = graph::RefineInstruction::Kind::Mute;
                in.target_handle = as_token(mute_handle);
            } else {
                return out.fail("Usage", "one of --add, --change or --mute is required", 2);
            }
            auto lease = pipeline::SessionLease::acquire(session_dir);
            auto s = pipeline::open_session(session_dir);
            const int h = s.graph().height(), w = s.graph().width();
            if (!hint_rle.empty()) in.mask_hint = graph::decode_rle(hint_rle, h, w);
            if (!hint_rect.empty()) in.mask_hint = rect_mask(hint_rect, h, w);
            if (now) {
                const auto record = s.refine_now(in);
                if (record.status == "failed") return out.fail(record.error_code, record.error, 1);
                auto body = session_summary(s);
                body["instruction"] = pipeline::to_json(record);
                out.emit(body, "applied " + std::string(graph::to_string(in.kind)) + "; graph version " +
                                   std::to_string(s.graph_version()));
            } else {
                s.queue_instruction(in);
                auto body = session_summary(s);
                body["queued"] = graph::instruction_to_json(in);
                out.emit(body, "queued " + std::string(graph::to_string(in.kind)) + " for the next step");
            }
            return 0;
        }

        if (*evaluate) {
            auto s = pipeline::open_session(session_dir);
            if (backend == "adapter" && command.empty()) command = s.config().embedder_command;
            const auto embedder = eval::make_embedder(backend, command);
            std::vector<Image> generated;
            for (std::size_t i = 1; i < s.frames().size(); ++i) generated.push_back(s.frames()[i].image);
            if (generated.empty()) generated.push_back(s.frames().front().image);
            const auto report = eval::scene_fidelity_report(
                s.frames().front().image, generated, *embedder,
                all_pairs ? eval::FidelityMode::AllPairs : eval::FidelityMode::InitialVsEach);
            std::ostringstream text;
            text << "scene fidelity " << report.metric << " over " << report.per_image.size() << " image(s) ["
                 << report.backend_id << "]";
            out.emit(eval::to_json(report), text.str());
            return 0;
        }

        if (*graph_cmd) {
            auto s = pipeline::open_session(session_dir);
            auto doc = graph::serialize(s.graph());
            doc["revision"] = s.graph_version();
            if (out.as_json) out.emit(doc, "");
            else std::cout << doc.dump(2) << "\n";
            return 0;
        }

        if (*validate_cmd) {
            const auto problems = pipeline::validate_session_dir(session_dir);
            out.emit({{"valid", problems.empty()}, {"problems", problems}},
                     problems.empty() ? "valid" : "invalid:\n  " + [&] {
                         std::string joined;
                         for (const auto& p : problems) joined += (joined.empty() ? "" : "\n  ") + p;
                         return joined;
                     }());
            return problems.empty() ? 0 : 1;
        }

        if (*serve) {
            service::ServiceConfig cfg;
            cfg.root = root;
            cfg.max_image_side = max_side;
            service::Service svc(cfg);
            const int bound = svc.bind(host, port);
            if (bound < 0) return out.fail("IoError", "cannot bind " + host + ":" + std::to_string(port), 2);
            g_service = &svc;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            if (out.as_json) std::cout << json{{"schema", kOutputSchema}, {"listening", host}, {"port", bound}}.dump() << std::endl;
            else std::cout << "listening on " << host << ":" << bound << std::endl;
            svc.listen();
            g_service = nullptr;
            return 0;
        }
    } catch (const Error& e) {
        const int code = e.code() == ErrorCode::IoError ? 2 : 1;
        return out.fail(std::string(to_string(e.code())), e.detail(), code);
    } catch (const fs::filesystem_error& e) {
        return out.fail("IoError", e.what(), 2);
    }
    return 2;
}
