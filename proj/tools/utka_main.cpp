#include <vector>
#include <string>

namespace utka::cli {
int run(const std::vector<std::string>& args);
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return utka::cli::run(args);
}
