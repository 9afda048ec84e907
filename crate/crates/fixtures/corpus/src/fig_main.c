#include <stdio.h>
#include <stdlib.h>

int FIGFN(int);

int main(int argc, char **argv) {
    for (int i = 1; i < argc; i++)
        printf("%d\n", FIGFN(atoi(argv[i])));
    return 0;
}
