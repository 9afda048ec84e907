#include <cstdio>
#include <cstdlib>
#include <stdexcept>

__attribute__((noinline)) int check(int x) {
    if (x > 10)
        throw std::runtime_error("too big");
    if (x < 0)
        throw 42;
    return x * 3;
}

__attribute__((noinline)) int guarded(int x) {
    try {
        return check(x);
    } catch (const std::runtime_error &e) {
        std::printf("caught: %s\n", e.what());
        return -1;
    } catch (int v) {
        std::printf("caught int %d\n", v);
        return -2;
    }
}

int main(int argc, char **argv) {
    int x = argc > 1 ? std::atoi(argv[1]) : 5;
    std::printf("result %d\n", guarded(x));
    return 0;
}
