#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) int classify(int x) {
    int r;
    if (x < 0)
        r = -1;
    else if (x == 0)
        r = 0;
    else
        r = x * 2 + 1;
    return r;
}

int main(int argc, char **argv) {
    int x = argc > 1 ? atoi(argv[1]) : 0;
    if (x > 100)
        puts("big");
    else
        puts("small");
    printf("%d\n", classify(x));
    return x & 3;
}
