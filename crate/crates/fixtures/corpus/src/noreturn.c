#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) void fatal(const char *msg) {
    fprintf(stderr, "fatal: %s\n", msg);
    exit(3);
}

__attribute__((noinline)) void die(void) { abort(); }

__attribute__((noinline)) int check(int c) {
    if (c > 5)
        fatal("too large");
    return c + 1;
}

void pong(int n);

__attribute__((noinline)) void ping(int n) {
    if (n <= 0)
        fatal("ping");
    pong(n - 1);
}

__attribute__((noinline)) void pong(int n) {
    if (n <= 0)
        fatal("pong");
    ping(n - 1);
}

int main(int argc, char **argv) {
    if (argc < 2)
        die();
    if (argv[1][0] == 'p')
        ping(4);
    printf("%d\n", check(atoi(argv[1])));
    return 0;
}
