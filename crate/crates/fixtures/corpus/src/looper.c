#include <stdio.h>
#include <string.h>

__attribute__((noinline)) int handle(const char *line) {
    if (line[0] == 'a')
        return 1;
    if (line[0] == 'b')
        return (int)strlen(line);
    return -1;
}

int main(void) {
    char line[128];
    puts("ready");
    fflush(stdout);
    while (fgets(line, sizeof line, stdin)) {
        printf("%d\n", handle(line));
        fflush(stdout);
    }
    return 0;
}
