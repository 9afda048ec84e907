#include <setjmp.h>
#include <stdio.h>
#include <stdlib.h>

static jmp_buf env;

__attribute__((noinline)) void work(int depth) {
    if (depth > 100)
        return;
    if (depth == 0)
        longjmp(env, 7);
    printf("depth %d\n", depth);
    work(depth - 1);
    printf("back %d\n", depth);
}

int main(int argc, char **argv) {
    int n = argc > 1 ? atoi(argv[1]) : 3;
    int r = setjmp(env);
    if (r == 0) {
        work(n);
        puts("returned");
    } else {
        printf("jumped %d\n", r);
    }
    return 0;
}
