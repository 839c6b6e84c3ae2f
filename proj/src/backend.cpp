#include "conretrieve/backend.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "conretrieve/errors.hpp"

namespace conretrieve {

using nlohmann::json;

RemoteChatBackend::RemoteChatBackend(RemoteEndpoint endpoint) : endpoint_(std::move(endpoint)) {
    const std::string& url = endpoint_.url;
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw ParseError("endpoint url must start with http:// or https://: " + url);
    size_t host_start = scheme_end + 3;
    size_t path_start = url.find('/', host_start);
    if (path_start == std::string::npos) {
        base_ = url;
        path_ = "/v1/chat/completions";
    } else {
        base_ = url.substr(0, path_start);
        path_ = url.substr(path_start);
    }
    if (base_.size() == host_start) throw ParseError("endpoint url has no host: " + url);
}

std::string RemoteChatBackend::complete(const std::string& prompt) {
    json body = {
        {"model", endpoint_.model},
        {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
        {"temperature", 0},
        {"max_tokens", 80},
    };

    httplib::Client client(base_);
    client.set_connection_timeout(10, 0);
    client.set_read_timeout(60, 0);

    httplib::Headers headers;
    if (const char* token = std::getenv(endpoint_.token_env.c_str()); token && *token)
        headers.emplace("Authorization", std::string("Bearer ") + token);

    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res)
        throw BackendUnavailable("no response from " + base_ + ": " +
                                 httplib::to_string(res.error()));
    if (res->status != 200)
        throw BackendUnavailable("HTTP " + std::to_string(res->status) + " from " + base_ + path_);

    json reply;
    try {
        reply = json::parse(res->body);
    } catch (const json::parse_error& e) {
        throw BackendUnavailable(std::string("unparseable response body: ") + e.what());
    }
    if (!reply.contains("choices") || !reply["choices"].is_array() || reply["choices"].empty())
        throw BackendUnavailable("response has no choices");
    const json& choice = reply["choices"][0];
    if (choice.contains("message") && choice["message"].contains("content") &&
        choice["message"]["content"].is_string())
        return choice["message"]["content"].get<std::string>();
    if (choice.contains("text") && choice["text"].is_string())
        return choice["text"].get<std::string>();
    throw BackendUnavailable("first choice has no text content");
}

std::string RemoteChatBackend::describe() const {
    return "remote(" + base_ + path_ + ", model=" + endpoint_.model + ")";
}

std::string complete_with_retry(ChatBackend& backend, const std::string& prompt,
                                const RetryPolicy& retry) {
    double delay_ms = retry.initial_delay_ms;
    int attempts = retry.attempts < 1 ? 1 : retry.attempts;
    for (int attempt = 1;; ++attempt) {
        try {
            return backend.complete(prompt);
        } catch (const BackendUnavailable&) {
            if (attempt >= attempts) throw;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(delay_ms)));
        delay_ms *= retry.multiplier;
    }
}

}  // namespace conretrieve
