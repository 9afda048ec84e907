#include <stdio.h>
#include <stdlib.h>

int dispatch(unsigned idx);

int main(int argc, char **argv) {
    for (int i = 1; i < argc; i++)
        printf("%d\n", dispatch((unsigned)atoi(argv[i])));
    return 0;
}
