#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) int sign(int x) {
    if (x > 0)
        return 1;
    if (x < 0)
        return -1;
    return 0;
}

int main(int argc, char **argv) {
    int x = argc > 1 ? atoi(argv[1]) : 0;
    printf("sign %d\n", sign(x));
    return 0;
}
